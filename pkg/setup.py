from setuptools import setup, find_packages

setup(
    name="stablelab",
    version="0.3.0",
    description="Monte Carlo and quadrature laboratory for the stable-times-Brownian product process on the upper half-space.",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    author="Kavindu Harshitha",
    author_email="kavindu@apexkv.com",
    license="MIT",
    license_files=("LICENSE",),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Mathematics",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    packages=find_packages(),
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.9",
        "django>=3.0.0",
    ],
    entry_points={
        "console_scripts": [
            "stablelab=stablelab.cli:main",
        ],
    },
    python_requires=">=3.9",
)
