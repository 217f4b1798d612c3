#!/usr/bin/env python3
"""Setup configuration for seqguard-cli."""

from setuptools import find_packages, setup

with open("README.md", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="seqguard-cli",
    version="1.0.0",
    author="SeqGuard Team",
    author_email="team@seqguard.dev",
    description="A CLI tool for detecting anomalous behavior sequences in smart-home event logs",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/seqguard/seqguard-cli",
    packages=find_packages(exclude=["tests", "tests.*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Developers",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    install_requires=[
        "click>=8.0.0",
        "numpy>=1.22.0",
        "scipy>=1.8.0",
        "scikit-learn>=1.1.0",
        "pandas>=1.5.0",
        "pyyaml>=6.0",
        "rich>=12.0.0",
        "psutil>=5.9.0",
        "python-dateutil>=2.8.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "pytest-mock>=3.10.0",
            "black>=22.0.0",
            "flake8>=5.0.0",
            "isort>=5.12.0",
            "mypy>=1.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "seqguard=seqguard.cli:main",
        ],
    },
    include_package_data=True,
)
