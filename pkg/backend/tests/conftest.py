"""
Shared fixtures for the jcimage test suite
"""
import shutil
import sys
from pathlib import Path

import orjson
import pytest

# Add the backend directory to the Python path
BACKEND_DIR = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(BACKEND_DIR))

from app.models.memory import MemoryConfig  # noqa: E402
from app.services.cap_builder import build_caps  # noqa: E402
from app.services.jca_parser import parse_file  # noqa: E402
from app.services.native_collector import collect_native_methods  # noqa: E402

FIXTURES = Path(__file__).resolve().parent / "fixtures"
CORPUS = FIXTURES / "corpus"
CORPUS_ORDER = ("com.acme.util", "com.acme.crypto", "com.acme.wallet")
PACKAGE_IDS = {"com.acme.util": 0, "com.acme.crypto": 1, "com.acme.wallet": 2, "sample": 3}


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def sample_package():
    return parse_file(FIXTURES / "sample.jca")


@pytest.fixture(scope="session")
def corpus_packages():
    by_name = {}
    for path in CORPUS.glob("*.jca"):
        package = parse_file(path)
        by_name[package.name] = package
    return [by_name[name] for name in CORPUS_ORDER]


@pytest.fixture(scope="session")
def all_packages(corpus_packages, sample_package):
    """Corpus packages first, so package sample gets id 3"""
    return corpus_packages + [sample_package]


@pytest.fixture(scope="session")
def all_natives(all_packages):
    return collect_native_methods(all_packages, PACKAGE_IDS)


@pytest.fixture(scope="session")
def caps(all_packages, all_natives):
    return {cap.package_name: cap for cap in build_caps(all_packages, all_natives)}


@pytest.fixture
def build_config() -> MemoryConfig:
    return MemoryConfig.model_validate(
        {
            "packages": [
                "com.acme.util",
                {"name": "com.acme.crypto", "native_only": True},
                "com.acme.wallet",
                {"name": "sample", "native_only": True},
            ],
            "entry_point": {"package": "com.acme.wallet", "class": "Wallet", "method": "install"},
        }
    )


@pytest.fixture
def jca_dir(tmp_path) -> Path:
    """Every fixture package in one directory"""
    target = tmp_path / "jca"
    shutil.copytree(CORPUS, target / "corpus")
    shutil.copy(FIXTURES / "sample.jca", target / "sample.jca")
    return target


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "build_config.json"
    path.write_bytes((FIXTURES / "build_config.json").read_bytes())
    return path


def write_config(path: Path, data: dict) -> Path:
    path.write_bytes(orjson.dumps(data))
    return path
