from setuptools import setup

setup(
    # The package name along with all the other metadata is specified in pyproject.toml
    # However, GitHub's dependency graph can't see the package unless we put this here.
    name="metaxt",
    packages=["metaxt"],
)
