import setuptools

VERSION = '0.1.0'

with open("requirements.txt", "r") as f:
    install_requires = f.readlines()


with open("README.md", "r") as fh:
    long_description = fh.read()


setuptools.setup(
    name="nvmux",
    version=VERSION,
    description="Simulation and analysis of massively multiplexed NV-center "
                "readout: EMCCD photon counting, spin-to-charge conversion, "
                "hologram synthesis and covariance magnetometry.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=('tests', 'examples', 'examples.*')),
    install_requires=install_requires,
    scripts=['nvmux/bin/nvmux'],
    package_data={'nvmux': ['recipes/*.json']},
    classifiers=[
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8',
    include_package_data=True
)
