"""
setuptools script for segp-bench

Usage:
    pip install -e .
"""

from setuptools import setup

setup(
    name="segp-bench",
    version="0.1.0",
    description="Desk-scale continual learning with adversarial anchors on a synthetic dual-tower model",
    packages=["src"],
    py_modules=["main"],
    install_requires=["numpy>=1.22", "tqdm>=4.60"],
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["segp-bench=main:main"]},
    python_requires=">=3.8",
)
