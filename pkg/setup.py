import os
from os.path import dirname

from setuptools import setup

__version__ = open("VERSION", "r").read().strip()
__lib_name__ = "tossfuse"


this_directory = os.path.abspath(dirname(__file__))
with open(os.path.join(this_directory, "README.md")) as f:
    long_description = f.read()


setup(
    name=__lib_name__,
    version=__version__,
    packages=["tossfuse"],
    package_dir={"tossfuse": "python/tossfuse"},
    description="Cyclic toss tracking, TSDF reconstruction and contact-geometry learning.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="Apache-2.0",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Natural Language :: English",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: POSIX :: Linux",
        "Programming Language :: Python :: Implementation :: CPython",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Image Processing",
        "Topic :: Scientific/Engineering :: Physics",
    ],
    entry_points={"console_scripts": ["tossfuse = tossfuse.cli:main"]},
    zip_safe=False,
    install_requires=[
        "numpy>=1.21",
        "scipy>=1.8",
        "scikit-image>=0.19",
        "trimesh>=3.9",
        "numba>=0.56",
        "torch>=1.12",
        "pandas>=1.4",
    ],
    extras_require={"test": "pytest"},
    python_requires=">=3.9",
)
