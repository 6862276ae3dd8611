from setuptools import setup, find_packages

setup(
    name="stratfit-cli",
    version="0.1.0",
    description="Laplacian-regularized stratified model fitting with distributed ADMM",
    author="",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "click>=8.0.0",
        "filelock>=3.9.0",
        "numpy>=1.22",
        "scipy>=1.12",
        "pandas>=1.5",
    ],
    extras_require={
        "test": [
            "pytest>=7.0",
            "hypothesis>=6.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "stratfit=stratfit.cli:main",
        ],
    },
    python_requires=">=3.9",
)
