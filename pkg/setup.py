from setuptools import setup, find_packages

setup(
    name="roadmesh",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "click>=8.0.0",
        "numpy>=1.22.0",
        "cryptography>=41.0.0",
        "memory-profiler>=0.61.0",
        "psutil>=5.9.0",
        "pytest>=7.4.0",
        "hypothesis>=6.80.0",
    ],
    entry_points={
        "console_scripts": [
            "roadmesh=roadmesh.cli:main",
        ],
    },
    python_requires=">=3.8",
)
