from __future__ import annotations

import pytest

from sealog.collector import IngestPolicy, LogWriter, RawEntry, ingest
from sealog.identity import DeviceIdentity
from sealog.keyschedule import ChainParams, RootLoggingKey
from sealog.sealstore import SealedStore

ROOT_SECRET = b"\x24" * 32


def build_store(directory, c=2, m=4, device_id=None, root_secret=ROOT_SECRET):
    identity = DeviceIdentity.generate(device_id)
    rlk = RootLoggingKey.generate()
    store = SealedStore.create(directory, root_secret, ChainParams(c=c, m=m), identity, rlk)
    return store


def fill_store(store, n_entries, body=lambda i: f"log entry {i}".encode()):
    writer = LogWriter(store)
    entries = (RawEntry(source="generic", body=body(i)) for i in range(n_entries))
    stats = ingest(entries, IngestPolicy(params=store.params), writer)
    return stats


@pytest.fixture
def small_store(tmp_path):
    """2 groups of 2 blocks of 4 records, fully committed."""
    store = build_store(tmp_path / "store", c=2, m=4)
    fill_store(store, 16)
    return store
