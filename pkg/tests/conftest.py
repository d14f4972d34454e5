"""Shared fixtures: seeded identities (keygen is the slow part) and apps."""

import random

import pytest

from apkprobe.signing import SeededIdentityFactory, WELL_KNOWN_STANDIN, generate_identity
from apkprobe.synth import linked_classes_app, token_app


@pytest.fixture(scope="session")
def identities():
    """Deterministic identity pool shared by the whole run."""
    factory = SeededIdentityFactory(0xC0FFEE)
    pool = {}

    def get(label):
        if label not in pool:
            pool[label] = factory.identity(label)
        return pool[label]

    return get


@pytest.fixture(scope="session")
def standin_identity():
    return generate_identity(WELL_KNOWN_STANDIN)


@pytest.fixture(scope="session")
def base_identity(identities):
    return identities("base")


@pytest.fixture(scope="session")
def sample_app(base_identity):
    """A signed app with dex, native, manifest and URL surface."""
    return token_app(
        "com.fixture.alpha",
        dex_tokens=["TOKEN_DEX_ALPHA"],
        native_tokens=["TOKEN_NATIVE_ALPHA"],
        manifest_tokens=["TOKEN_PERM_ALPHA"],
        urls=["http://tracker.local/x/leftover"],
        rng=random.Random(11),
        identity=base_identity)


@pytest.fixture(scope="session")
def linked_app(identities):
    return linked_classes_app("com.fixture.linked",
                              identity=identities("linked"))
