from pathlib import Path

from setuptools import find_packages, setup

requirements = [
    line.split("#", 1)[0].strip()
    for line in Path(__file__).with_name("requirements.txt").read_text(encoding="utf-8").splitlines()
    if line.split("#", 1)[0].strip() and not line.startswith(("pytest", "coverage"))
]

setup(
    name="muse-distill",
    version="0.1.0",
    description="Distillation de connaissances sans données, multi-résolution, sur CPU",
    packages=find_packages(exclude=("tests", "tests.*")),
    install_requires=requirements,
    python_requires=">=3.9",
    entry_points={"console_scripts": ["muse=muse_distill.dfkd.cli:main"]},
)
