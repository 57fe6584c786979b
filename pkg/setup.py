"""
lfrt
Low-light light-field restoration: a transformer restoration network on a numpy autodiff engine, with noise calibration and synthesis.
"""
from setuptools import setup

DOCLINES = __doc__.split("\n")

version = {}
with open('lfrt/_version.py') as infile:
    exec(infile.read(), version)

setup(
    # Self-descriptive entries which should always be present
    name='lfrt',
    description=DOCLINES[2],
    long_description="\n".join(DOCLINES[1:]),
    version=version['VERSION'],
    license='MIT',

    packages=['lfrt', 'lfrt.tests'],

    entry_points={
        'console_scripts' : [
            'lfrt = lfrt.cli:main',
        ]
    },

    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'natsort',
        'opencv-python-headless',
    ],
    extras_require={
        'test': ['pytest'],
    },
    python_requires=">=3.8",
    zip_safe=False,
)
