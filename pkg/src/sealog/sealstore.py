"""Sealed persistent storage emulating TEE secure storage on an untrusted FS.

Every persisted object is an AES-256-GCM envelope: a 14-byte header
(magic "EMLS", version, object type, BE64 object id) authenticated as
associated data, a random 96-bit nonce, then ciphertext+tag.  The storage
key is derived per application identity from a device root storage key, so
no other application identity can unseal or forge objects.

The store keeps one file per object (``blk_<id>.seal``, ``ik_<gid>.seal``,
``state.seal``, ``manifest.seal``).  Commits are crash-safe: payloads are
written to a temp file, flushed, atomically renamed, and the directory
fsynced; the monotonic chain-state record is committed with the same
protocol after its block, so any crash leaves either the pre- or
post-commit view, never a torn file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AlreadyExists,
    AuthFailure,
    InvalidParameter,
    ParseError,
    StorageError,
)
from .identity import DeviceIdentity
from .keyschedule import (
    KEY_LEN,
    LABEL_STORAGE,
    SCHEME_SALT,
    ChainParams,
    IntermediateKey,
    RootLoggingKey,
    hkdf,
)
from .logchain import (
    STATUS_SEAL_FAILURE,
    Block,
    BlockEntry,
    VerificationReport,
    verify_sequence,
)

SEAL_MAGIC = b"EMLS"
SEAL_VERSION = 1
NONCE_LEN = 12
GCM_TAG_LEN = 16

OBJECT_BLOCK = 1
OBJECT_IK = 2
OBJECT_STATE = 3
OBJECT_MANIFEST = 4

DEFAULT_MAX_PAYLOAD = 16 * 1024 * 1024
MAX_WRITES_PER_KEY = 2**32  # random 96-bit nonce budget guard

# Default application identity for the log-writer role.
LOG_WRITER_APP_ID = b"log-writer-v1"

_HEADER = struct.Struct(">4sBBQ")
_STATE_PAYLOAD = struct.Struct(">IIIQQI")

# Sentinel for "no blocks delivered yet" in the delivered watermark.
NO_WATERMARK = 0xFFFFFFFF

# Signature context for chain-state snapshots exported off-device.
STATE_SIGN_MAGIC = b"EMST"


@dataclass(frozen=True)
class SealedObject:
    version: int
    object_type: int
    object_id: int
    nonce: bytes
    ciphertext: bytes  # includes the GCM tag

    def header(self) -> bytes:
        return _HEADER.pack(SEAL_MAGIC, self.version, self.object_type, self.object_id)

    def serialize(self) -> bytes:
        return self.header() + self.nonce + self.ciphertext

    @classmethod
    def deserialize(cls, data: bytes) -> "SealedObject":
        if len(data) < _HEADER.size + NONCE_LEN + GCM_TAG_LEN:
            raise ParseError("sealed object too short")
        magic, version, object_type, object_id = _HEADER.unpack_from(data)
        if magic != SEAL_MAGIC:
            raise ParseError(f"bad seal magic {magic!r}")
        if version != SEAL_VERSION:
            raise ParseError(f"unsupported seal version {version}")
        return cls(
            version=version,
            object_type=object_type,
            object_id=object_id,
            nonce=data[_HEADER.size : _HEADER.size + NONCE_LEN],
            ciphertext=data[_HEADER.size + NONCE_LEN :],
        )


class StorageKey:
    """Application-bound sealing key with a nonce-budget write counter."""

    __slots__ = ("_key", "writes")

    def __init__(self, key: bytes) -> None:
        if len(key) != KEY_LEN:
            raise InvalidParameter(f"storage key must be {KEY_LEN} bytes")
        self._key = key
        self.writes = 0

    def key_bytes(self) -> bytes:
        return self._key

    def __repr__(self) -> str:
        return f"<StorageKey writes={self.writes}>"


def derive_storage_key(root_storage_key: bytes, app_id: bytes) -> StorageKey:
    """Derive the sealing key for one application identity."""
    if len(root_storage_key) != KEY_LEN:
        raise InvalidParameter(f"root storage key must be {KEY_LEN} bytes")
    return StorageKey(hkdf(root_storage_key, SCHEME_SALT, LABEL_STORAGE + app_id, KEY_LEN))


def seal(
    payload: bytes,
    sk: StorageKey,
    object_type: int,
    object_id: int,
    max_payload: int = DEFAULT_MAX_PAYLOAD,
) -> SealedObject:
    if len(payload) > max_payload:
        raise InvalidParameter(f"payload of {len(payload)} bytes exceeds {max_payload}")
    if sk.writes >= MAX_WRITES_PER_KEY:
        raise StorageError("storage key write budget exhausted; re-key the store")
    sk.writes += 1
    nonce = os.urandom(NONCE_LEN)
    obj = SealedObject(
        version=SEAL_VERSION,
        object_type=object_type,
        object_id=object_id,
        nonce=nonce,
        ciphertext=b"",
    )
    ct = AESGCM(sk.key_bytes()).encrypt(nonce, payload, obj.header())
    return SealedObject(SEAL_VERSION, object_type, object_id, nonce, ct)


def unseal(obj: SealedObject, sk: StorageKey) -> bytes:
    """Open a sealed object; any header or body mutation raises AuthFailure.

    A wrong key is indistinguishable from tampering and reports the same.
    """
    try:
        return AESGCM(sk.key_bytes()).decrypt(obj.nonce, obj.ciphertext, obj.header())
    except InvalidTag as exc:
        raise AuthFailure(
            f"unseal failed for object type={obj.object_type} id={obj.object_id}"
        ) from exc


# Chain state ---------------------------------------------------------------


@dataclass
class ChainState:
    """Monotonic record of the latest committed chain position.

    ``sealed_blocks == 0`` means nothing is committed yet and the position
    fields are meaningless.  The commit counter strictly increases with
    every state write; the delivered watermark tracks the newest block
    already handed to a verifier (NO_WATERMARK when none).
    """

    group_id: int = 0
    block_id: int = 0
    msg_count: int = 0
    sealed_blocks: int = 0
    commit_counter: int = 0
    delivered_mark: int = NO_WATERMARK

    @property
    def latest_block_id(self) -> int | None:
        return self.block_id if self.sealed_blocks > 0 else None

    def pack(self) -> bytes:
        return _STATE_PAYLOAD.pack(
            self.group_id,
            self.block_id,
            self.msg_count,
            self.sealed_blocks,
            self.commit_counter,
            self.delivered_mark,
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "ChainState":
        if len(payload) != _STATE_PAYLOAD.size:
            raise ParseError(f"chain state payload must be {_STATE_PAYLOAD.size} bytes")
        return cls(*_STATE_PAYLOAD.unpack(payload))

    def sign_preimage(self) -> bytes:
        return STATE_SIGN_MAGIC + self.pack()


@dataclass
class StoreManifest:
    """Device-local sealed bundle: chain parameters plus the device secrets."""

    params: ChainParams
    device_id: bytes
    rlk: bytes
    signing_key_der: bytes
    certificate_pem: bytes

    def pack(self) -> bytes:
        return json.dumps(
            {
                "version": 1,
                "c": self.params.c,
                "m": self.params.m,
                "device_id": self.device_id.hex(),
                "rlk": self.rlk.hex(),
                "signing_key_der": self.signing_key_der.hex(),
                "certificate_pem": self.certificate_pem.decode("ascii"),
            }
        ).encode("utf-8")

    @classmethod
    def unpack(cls, payload: bytes) -> "StoreManifest":
        try:
            doc = json.loads(payload.decode("utf-8"))
            return cls(
                params=ChainParams(c=doc["c"], m=doc["m"]),
                device_id=bytes.fromhex(doc["device_id"]),
                rlk=bytes.fromhex(doc["rlk"]),
                signing_key_der=bytes.fromhex(doc["signing_key_der"]),
                certificate_pem=doc["certificate_pem"].encode("ascii"),
            )
        except (KeyError, ValueError, UnicodeDecodeError) as exc:
            raise ParseError(f"malformed store manifest: {exc}") from exc


# Atomic file plumbing ------------------------------------------------------


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_DIRECTORY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class SealedStore:
    """One directory of sealed objects plus the committed chain state.

    ``crash_hook`` is a test seam: when set, it is invoked with a step
    label at every point a power loss could strike during a commit, and may
    raise to simulate the crash.
    """

    def __init__(self, directory: str | Path, sk: StorageKey, manifest: StoreManifest):
        self.directory = Path(directory)
        self.sk = sk
        self.manifest = manifest
        self.state: ChainState | None = ChainState()
        self.state_error: str | None = None
        self.crash_hook: Callable[[str], None] | None = None

    # -- paths --

    def block_path(self, block_id: int) -> Path:
        return self.directory / f"blk_{block_id:08d}.seal"

    def ik_path(self, group_id: int) -> Path:
        return self.directory / f"ik_{group_id:08d}.seal"

    @property
    def state_path(self) -> Path:
        return self.directory / "state.seal"

    @property
    def manifest_path(self) -> Path:
        return self.directory / "manifest.seal"

    # -- lifecycle --

    @classmethod
    def create(
        cls,
        directory: str | Path,
        root_storage_key: bytes,
        params: ChainParams,
        identity: DeviceIdentity,
        rlk: RootLoggingKey,
        app_id: bytes = LOG_WRITER_APP_ID,
    ) -> "SealedStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if any(directory.iterdir()):
            raise AlreadyExists(f"store directory {directory} is not empty")
        sk = derive_storage_key(root_storage_key, app_id)
        manifest = StoreManifest(
            params=params,
            device_id=identity.device_id,
            rlk=rlk.key_bytes(),
            signing_key_der=identity.private_key_der(),
            certificate_pem=identity.certificate_pem(),
        )
        store = cls(directory, sk, manifest)
        store._write_sealed(store.manifest_path, manifest.pack(), OBJECT_MANIFEST, 0)
        store._commit_state(store.state)
        # Exportable copy of the public certificate for verifiers.
        (directory / "cert.pem").write_bytes(identity.certificate_pem())
        return store

    @classmethod
    def open(
        cls,
        directory: str | Path,
        root_storage_key: bytes,
        app_id: bytes = LOG_WRITER_APP_ID,
    ) -> "SealedStore":
        directory = Path(directory)
        if not directory.is_dir():
            raise StorageError(f"store directory {directory} does not exist")
        sk = derive_storage_key(root_storage_key, app_id)
        placeholder = StoreManifest(ChainParams(1, 1), b"\x00" * 16, b"\x00" * 32, b"", b"")
        store = cls(directory, sk, placeholder)
        store.manifest = StoreManifest.unpack(
            store._read_sealed(store.manifest_path, OBJECT_MANIFEST, 0)
        )
        # A missing or unreadable state record is a first-class audit
        # finding, so opening for verification must survive it.
        try:
            store.state = store.load_state()
        except (StorageError, AuthFailure, ParseError) as exc:
            store.state = None
            store.state_error = str(exc)
        return store

    def identity(self) -> DeviceIdentity:
        return DeviceIdentity.from_material(
            self.manifest.certificate_pem, self.manifest.signing_key_der
        )

    def root_logging_key(self) -> RootLoggingKey:
        return RootLoggingKey(self.manifest.rlk)

    @property
    def params(self) -> ChainParams:
        return self.manifest.params

    # -- sealed file IO --

    def _hook(self, step: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(step)

    def _write_sealed(
        self, path: Path, payload: bytes, object_type: int, object_id: int, step: str = ""
    ) -> None:
        data = seal(payload, self.sk, object_type, object_id).serialize()
        prefix = step or path.name
        self._hook(f"{prefix}:start")
        fd, tmp_name = tempfile.mkstemp(prefix=".tmp-", dir=self.directory)
        tmp = Path(tmp_name)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            self._hook(f"{prefix}:tmp-written")
            os.replace(tmp, path)
            self._hook(f"{prefix}:renamed")
            _fsync_dir(self.directory)
            self._hook(f"{prefix}:durable")
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StorageError(f"failed writing {path.name}: {exc}") from exc
        except BaseException:
            tmp.unlink(missing_ok=True)
            raise

    def _read_sealed(self, path: Path, object_type: int, object_id: int) -> bytes:
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read {path.name}: {exc}") from exc
        obj = SealedObject.deserialize(raw)
        if obj.object_type != object_type or obj.object_id != object_id:
            raise AuthFailure(
                f"{path.name} header claims type={obj.object_type} id={obj.object_id}, "
                f"expected type={object_type} id={object_id}"
            )
        return unseal(obj, self.sk)

    # -- chain state --

    def _commit_state(self, new_state: ChainState) -> None:
        self._write_sealed(self.state_path, new_state.pack(), OBJECT_STATE, 0, step="state")
        self.state = new_state

    def load_state(self) -> ChainState:
        return ChainState.unpack(self._read_sealed(self.state_path, OBJECT_STATE, 0))

    def has_state(self) -> bool:
        return self.state_path.exists()

    def _require_state(self) -> ChainState:
        if self.state is None:
            raise StorageError(f"chain state unavailable: {self.state_error}")
        return self.state

    def signed_state_snapshot(self) -> tuple[ChainState, bytes]:
        """State plus a device signature so off-device copies stay auditable."""
        state = self._require_state()
        identity = self.identity()
        return state, identity.sign(state.sign_preimage())

    def mark_delivered(self, block_id: int) -> None:
        self._require_state()
        if self.state.delivered_mark != NO_WATERMARK and block_id <= self.state.delivered_mark:
            return
        new_state = ChainState(
            group_id=self.state.group_id,
            block_id=self.state.block_id,
            msg_count=self.state.msg_count,
            sealed_blocks=self.state.sealed_blocks,
            commit_counter=self.state.commit_counter + 1,
            delivered_mark=block_id,
        )
        self._commit_state(new_state)

    # -- blocks --

    def commit_block(self, block: Block) -> ChainState:
        """Durably seal one block, then the advanced chain state."""
        return self.commit_blocks([block])

    def commit_blocks(self, blocks: list[Block]) -> ChainState:
        """Seal a contiguous batch of blocks, then one state advance.

        The state record is committed once, after the whole batch, which is
        what makes larger group sizes cheaper per log: one durable state
        write per group instead of per block.  A crash mid-batch leaves
        uncommitted block files that recovery drops; the producer replays
        them from its in-RAM window.
        """
        if not blocks:
            return self._require_state()
        latest = self._require_state().latest_block_id
        expected = 0 if latest is None else latest + 1
        for offset, block in enumerate(blocks):
            if block.block_id != expected + offset:
                raise InvalidParameter(
                    f"commit out of order: block {block.block_id}, "
                    f"expected {expected + offset}"
                )
        for block in blocks:
            self._write_sealed(
                self.block_path(block.block_id),
                block.serialize(),
                OBJECT_BLOCK,
                block.block_id,
                step=f"block{block.block_id}",
            )
        last = blocks[-1]
        new_state = ChainState(
            group_id=self.params.group_of(last.block_id),
            block_id=last.block_id,
            msg_count=len(last.records),
            sealed_blocks=self.state.sealed_blocks + len(blocks),
            commit_counter=self.state.commit_counter + 1,
            delivered_mark=self.state.delivered_mark,
        )
        self._commit_state(new_state)
        return new_state

    def load_block(self, block_id: int) -> Block:
        payload = self._read_sealed(self.block_path(block_id), OBJECT_BLOCK, block_id)
        block = Block.deserialize(payload)
        if block.block_id != block_id:
            raise AuthFailure(
                f"sealed payload carries block {block.block_id}, expected {block_id}"
            )
        return block

    def block_ids_on_disk(self) -> list[int]:
        ids = []
        for path in self.directory.glob("blk_*.seal"):
            try:
                ids.append(int(path.stem.split("_")[1]))
            except (IndexError, ValueError):
                continue
        return sorted(ids)

    def iter_committed_blocks(self) -> Iterator[tuple[int, Block | None, str | None]]:
        """Yield (block_id, block, error) for every committed id in order.

        ``block`` is None when the file is missing or fails to unseal; the
        error string then classifies the failure (gap vs seal-failure).
        """
        latest = self.state.latest_block_id if self.state is not None else None
        if latest is None:
            return
        for block_id in range(latest + 1):
            path = self.block_path(block_id)
            if not path.exists():
                yield block_id, None, "missing"
                continue
            try:
                yield block_id, self.load_block(block_id), None
            except (AuthFailure, ParseError) as exc:
                yield block_id, None, str(exc)

    # -- intermediate keys --

    def seal_ik(self, ik: IntermediateKey) -> None:
        """Persist a group's intermediate key exactly once, then erase it."""
        path = self.ik_path(ik.group_id)
        if path.exists():
            raise AlreadyExists(f"intermediate key for group {ik.group_id} already sealed")
        self._write_sealed(
            path, ik.key_bytes(), OBJECT_IK, ik.group_id, step=f"ik{ik.group_id}"
        )
        ik.erase()

    def has_ik(self, group_id: int) -> bool:
        return self.ik_path(group_id).exists()

    def load_ik(self, group_id: int) -> IntermediateKey:
        key = self._read_sealed(self.ik_path(group_id), OBJECT_IK, group_id)
        return IntermediateKey(group_id=group_id, key=bytearray(key))

    # -- recovery --

    def recover(self) -> ChainState:
        """Bring the directory back to the committed view after a crash.

        Temp files are removed; any complete block file newer than the
        committed state is dropped (its content is still re-derivable and
        re-committable by the producer).
        """
        for tmp in self.directory.glob(".tmp-*"):
            tmp.unlink(missing_ok=True)
        self.state = self.load_state()
        latest = self.state.latest_block_id
        for block_id in self.block_ids_on_disk():
            if latest is None or block_id > latest:
                self.block_path(block_id).unlink(missing_ok=True)
        return self.state


def verify_store(store: SealedStore, full: bool = True):
    """Audit everything committed to a local store.

    Collects blocks (classifying unseal failures), then delegates to the
    sequence verifier; a missing or unreadable state record becomes a
    ``missing-state`` finding rather than an error.
    """
    mode = "full" if full else "public"
    report = VerificationReport(mode=mode, expected_start=0)
    identity = store.identity()
    rlk = store.root_logging_key() if full else None

    blocks = []
    if store.state is not None:
        for block_id, block, error in store.iter_committed_blocks():
            if error is None:
                blocks.append(block)
            elif error != "missing":
                report.add(BlockEntry(block_id, STATUS_SEAL_FAILURE, detail=error))
    else:
        # No trustworthy committed range: audit whatever files exist.
        for block_id in store.block_ids_on_disk():
            try:
                blocks.append(store.load_block(block_id))
            except (AuthFailure, ParseError) as exc:
                report.add(BlockEntry(block_id, STATUS_SEAL_FAILURE, detail=str(exc)))

    return verify_sequence(
        blocks, 0, store.state, rlk, identity.public_key, store.params, report=report
    )
