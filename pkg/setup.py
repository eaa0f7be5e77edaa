#!/usr/bin/env python3
"""
Contextrast Setup Script
Package metadata and the `contextrast` console entry point
"""
from pathlib import Path

from setuptools import find_packages, setup

ROOT = Path(__file__).parent


def read_requirements():
    """Pinned runtime requirements, without the test runner"""
    lines = (ROOT / 'requirements.txt').read_text(encoding='utf-8').splitlines()
    return [line.strip() for line in lines if line.strip() and not line.startswith(('#', 'pytest'))]


setup(
    name='contextrast',
    version='1.0.0',
    description='Contextual contrastive segmentation losses, boundary-aware negative sampling and metrics',
    long_description=(ROOT / 'README.md').read_text(encoding='utf-8'),
    long_description_content_type='text/markdown',
    packages=find_packages(exclude=('tests', 'tests.*', 'examples', 'examples.*')),
    python_requires='>=3.10',
    install_requires=read_requirements(),
    extras_require={'test': ['pytest==7.4.3']},
    entry_points={'console_scripts': ['contextrast=contextrast.cli:main']},
)
