#!/usr/bin/env python3
"""
Setup Script for dynrisk
Installs the package and the `dynrisk` command.
"""

from pathlib import Path

from setuptools import find_packages, setup

ROOT = Path(__file__).parent


def read_requirements() -> list:
    """Runtime requirements from requirements.txt (development tools excluded)."""
    requirements = []
    for line in (ROOT / "requirements.txt").read_text(encoding="utf-8").splitlines():
        line = line.split("#")[0].strip()
        if line and not line.startswith(("black", "pytest")):
            requirements.append(line)
    return requirements


setup(
    name="dynrisk",
    version="0.1.0",
    description="Dynamic COVID-19 mortality risk modelling: random forest and Cox models with LOO evaluation",
    long_description=(ROOT / "README.md").read_text(encoding="utf-8"),
    long_description_content_type="text/markdown",
    packages=find_packages(include=["dynrisk", "dynrisk.*"]),
    python_requires=">=3.9",
    install_requires=read_requirements(),
    extras_require={"dev": ["black>=23.0.0", "pytest>=7.3.0"]},
    entry_points={"console_scripts": ["dynrisk=dynrisk.cli:main"]},
)
