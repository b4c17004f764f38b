from setuptools import setup, find_packages

setup(
    name="multimodal-gpc",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.21.0",
        "scipy>=1.8.0",
        "pandas>=1.3.0",
        "scikit-learn>=1.0.0",
        "tqdm>=4.60.0",
    ],
    entry_points={
        "console_scripts": [
            "multimodal-gpc=multimodal_gpc.cli:main",
        ],
    },
    author="Your Name",
    author_email="your.email@example.com",
    description="Bayesian multinomial logit classification with multiple weighted kernels, sampled by (RM-)HMC and MH",
    python_requires=">=3.8",
)
