#!/usr/bin/env python

from setuptools import setup

setup(
    name="deskrl.viewgen",
    version="0.1.0",
    description="Desk-scale multi-view visual RL that generalizes across camera views.",
    author="deskrl developers",
    license="APL 2",
    keywords=["reinforcement learning", "sim2real", "robotics", "representation"],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: POSIX",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    packages=["deskrl", "deskrl.viewgen"],
    package_data={"deskrl.viewgen": ["configs/*.yaml"]},
    install_requires=[
        "numpy >=1.22",
        "torch >=2.0",
        "opencv-python-headless >=4.6",
        "Pillow >=9.0",
        "matplotlib >=3.6",
        "omegaconf >=2.3, <2.4",
    ],
    test_suite="tests.viewgen",
)
