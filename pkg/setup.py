#! /usr/bin/env python3
from setuptools import find_packages, setup

with open('requirements.txt', 'r') as f:
    install_requires = f.read().splitlines()

setup(
    name='rar-trial-simulator',
    version='0.1.0',
    description='Simulate response-adaptive randomised trials with binary outcomes under time trends',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    entry_points={
        'console_scripts': ['rar-sim = core.cli:cli']
    },
    python_requires=">=3.10",
    packages=find_packages(exclude=['tests']),
    include_package_data=True,
    install_requires=install_requires,
    classifiers=[
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'License :: OSI Approved :: Apache Software License',
        'Operating System :: OS Independent'
    ],
    tests_require=['pytest']
)
