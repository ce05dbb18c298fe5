"""Device-side export service and verifier-side retrieval client.

The wire format is length-prefixed binary frames (PROTOCOL.md):

    frame    := BE32 length || type(1) || payload
    HELLO    := version(1) role(1) device_id(16)
                BE16 cert_len cert_der BE16 ev_len evidence
                ephemeral_pub(65, SEC1 uncompressed P-256) nonce(16)
    AUTH     := signature(64)   over "EMHS" || role || SHA256(transcript)
    DATA     := BE64 seq || AES-256-GCM ciphertext
    ABORT    := code(1) || utf-8 reason

Both ends present certificates validated against the peer's trust anchors
and prove key possession by signing the handshake transcript, so the
channel is mutually authenticated before any log material moves.  Session
keys come from an ephemeral P-256 ECDH exchange; each direction has its
own key and sequence counter, and a frame whose sequence number runs
backwards is rejected as a replay.  Attestation evidence is carried
opaquely and handed to a pluggable policy hook; validating it is out of
scope here.

Inside the encrypted channel, messages are type-tagged: a range request,
the serialized blocks in ascending order, a final summary carrying the
signed chain state (so a dishonest transport cannot silently truncate),
and an integrity alarm if a sealed block fails to open mid-transfer.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography import x509
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.exceptions import InvalidTag

from .errors import (
    AuthFailure,
    ChannelClosed,
    InvalidParameter,
    NegotiationFailure,
    ParseError,
    ReplayDetected,
)
from .identity import (
    DEVICE_ID_LEN,
    SIGNATURE_LEN,
    DeviceIdentity,
    validate_peer_certificate,
    verify_raw,
)
from .keyschedule import LABEL_CHANNEL, SCHEME_SALT, ChainParams, RootLoggingKey, hkdf
from .logchain import (
    FINDING_INTEGRITY_ALARM,
    Block,
    VerificationReport,
    verify_sequence,
)
from .sealstore import ChainState, SealedStore

PROTOCOL_VERSION = 1
MAX_FRAME_LEN = 32 * 1024 * 1024

FRAME_HELLO = 0x01
FRAME_AUTH = 0x02
FRAME_DATA = 0x10
FRAME_ABORT = 0x7F

MSG_REQUEST = 0x20
MSG_BLOCK = 0x21
MSG_SUMMARY = 0x22
MSG_ALARM = 0x23

ABORT_AUTH = 1
ABORT_NEGOTIATION = 2
ABORT_REPLAY = 3
ABORT_INTEGRITY = 4
ABORT_INTERNAL = 5

ROLE_DEVICE = 1
ROLE_VERIFIER = 2

RANGE_OPEN_END = 0xFFFFFFFF
MODE_PUBLIC = 0
MODE_FULL = 1

HELLO_NONCE_LEN = 16
_EPH_PUB_LEN = 65
_TRANSCRIPT_MAGIC = b"EMHS"
_FRAME_AAD_MAGIC = b"EMFR"

AttestationPolicy = Callable[[bytes, int, bytes], bool]


# Frame transport -----------------------------------------------------------


class FrameTransport:
    """Blocking length-prefixed frame IO over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send_frame(self, frame_type: int, payload: bytes) -> None:
        if 1 + len(payload) > MAX_FRAME_LEN:
            raise InvalidParameter("frame exceeds maximum length")
        self._sock.sendall(struct.pack(">IB", 1 + len(payload), frame_type) + payload)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise ChannelClosed("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def recv_frame(self) -> tuple[int, bytes]:
        (length,) = struct.unpack(">I", self._recv_exact(4))
        if length < 1 or length > MAX_FRAME_LEN:
            raise ParseError(f"frame length {length} out of range")
        body = self._recv_exact(length)
        return body[0], body[1:]

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _abort(transport: FrameTransport, code: int, reason: str) -> None:
    try:
        transport.send_frame(FRAME_ABORT, bytes([code]) + reason.encode("utf-8"))
    except (OSError, ChannelClosed):
        pass


_ABORT_ERRORS = {
    ABORT_AUTH: AuthFailure,
    ABORT_NEGOTIATION: NegotiationFailure,
    ABORT_REPLAY: ReplayDetected,
}


def _raise_abort(payload: bytes) -> None:
    code = payload[0] if payload else ABORT_INTERNAL
    reason = payload[1:].decode("utf-8", errors="replace") if len(payload) > 1 else ""
    exc = _ABORT_ERRORS.get(code, AuthFailure)
    raise exc(f"peer aborted: {reason or code}")


# Handshake -----------------------------------------------------------------


@dataclass
class ChannelHello:
    version: int
    role: int
    device_id: bytes
    certificate_der: bytes
    evidence: bytes
    ephemeral_pub: bytes
    nonce: bytes

    def pack(self) -> bytes:
        return (
            bytes([self.version, self.role])
            + self.device_id
            + struct.pack(">H", len(self.certificate_der))
            + self.certificate_der
            + struct.pack(">H", len(self.evidence))
            + self.evidence
            + self.ephemeral_pub
            + self.nonce
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "ChannelHello":
        try:
            version, role = payload[0], payload[1]
            offset = 2
            device_id = payload[offset : offset + DEVICE_ID_LEN]
            offset += DEVICE_ID_LEN
            (cert_len,) = struct.unpack_from(">H", payload, offset)
            offset += 2
            cert = payload[offset : offset + cert_len]
            offset += cert_len
            (ev_len,) = struct.unpack_from(">H", payload, offset)
            offset += 2
            evidence = payload[offset : offset + ev_len]
            offset += ev_len
            eph = payload[offset : offset + _EPH_PUB_LEN]
            offset += _EPH_PUB_LEN
            nonce = payload[offset : offset + HELLO_NONCE_LEN]
            if (
                len(device_id) != DEVICE_ID_LEN
                or len(cert) != cert_len
                or len(eph) != _EPH_PUB_LEN
                or len(nonce) != HELLO_NONCE_LEN
                or offset + HELLO_NONCE_LEN != len(payload)
            ):
                raise ParseError("hello payload truncated")
        except (IndexError, struct.error) as exc:
            raise ParseError(f"malformed hello: {exc}") from exc
        return cls(version, role, device_id, cert, evidence, eph, nonce)


class HelloReplayCache:
    """Remembers recent hello nonces so a recorded handshake cannot rerun."""

    def __init__(self, capacity: int = 4096):
        self._seen: set[bytes] = set()
        self._order: deque[bytes] = deque()
        self._capacity = capacity
        self._lock = threading.Lock()

    def check_and_add(self, nonce: bytes) -> bool:
        with self._lock:
            if nonce in self._seen:
                return False
            self._seen.add(nonce)
            self._order.append(nonce)
            if len(self._order) > self._capacity:
                self._seen.discard(self._order.popleft())
            return True


class SecureSession:
    """AEAD-protected message channel after a completed handshake."""

    def __init__(
        self,
        transport: FrameTransport,
        send_key: bytes,
        recv_key: bytes,
        send_direction: int,
        recv_direction: int,
        peer_device_id: bytes,
        peer_certificate: x509.Certificate,
        peer_evidence: bytes,
    ):
        self._transport = transport
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self._send_dir = send_direction
        self._recv_dir = recv_direction
        self._send_seq = 0
        self._recv_seq = 0
        self.peer_device_id = peer_device_id
        self.peer_certificate = peer_certificate
        self.peer_evidence = peer_evidence

    @staticmethod
    def _nonce(seq: int) -> bytes:
        return b"\x00\x00\x00\x00" + struct.pack(">Q", seq)

    @staticmethod
    def _aad(direction: int, seq: int) -> bytes:
        return _FRAME_AAD_MAGIC + bytes([direction]) + struct.pack(">Q", seq)

    def send_message(self, msg_type: int, body: bytes) -> None:
        seq = self._send_seq
        self._send_seq += 1
        ct = self._send.encrypt(
            self._nonce(seq), bytes([msg_type]) + body, self._aad(self._send_dir, seq)
        )
        self._transport.send_frame(FRAME_DATA, struct.pack(">Q", seq) + ct)

    def recv_message(self) -> tuple[int, bytes]:
        frame_type, payload = self._transport.recv_frame()
        if frame_type == FRAME_ABORT:
            _raise_abort(payload)
        if frame_type != FRAME_DATA:
            raise ParseError(f"unexpected frame type {frame_type} inside session")
        if len(payload) < 8:
            raise ParseError("data frame too short")
        (seq,) = struct.unpack_from(">Q", payload)
        if seq < self._recv_seq:
            raise ReplayDetected(f"frame sequence {seq} already consumed")
        if seq > self._recv_seq:
            raise AuthFailure(f"frame sequence jumped to {seq}, expected {self._recv_seq}")
        try:
            plain = self._recv.decrypt(
                self._nonce(seq), payload[8:], self._aad(self._recv_dir, seq)
            )
        except InvalidTag as exc:
            raise AuthFailure("session frame failed authentication") from exc
        self._recv_seq += 1
        if not plain:
            raise ParseError("empty session message")
        return plain[0], plain[1:]

    def abort(self, code: int, reason: str) -> None:
        _abort(self._transport, code, reason)

    def close(self) -> None:
        self._transport.close()


def _session_keys(
    eph_private: ec.EllipticCurvePrivateKey, peer_pub_bytes: bytes, transcript_hash: bytes
) -> tuple[bytes, bytes]:
    peer_pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), peer_pub_bytes)
    shared = eph_private.exchange(ec.ECDH(), peer_pub)
    okm = hkdf(shared, SCHEME_SALT, LABEL_CHANNEL + transcript_hash, 64)
    return okm[:32], okm[32:]  # (verifier->device, device->verifier)


def _make_hello(identity: DeviceIdentity, role: int, evidence: bytes) -> tuple[ChannelHello, ec.EllipticCurvePrivateKey]:
    eph = ec.generate_private_key(ec.SECP256R1())
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )
    hello = ChannelHello(
        version=PROTOCOL_VERSION,
        role=role,
        device_id=identity.device_id,
        certificate_der=identity.certificate.public_bytes(serialization.Encoding.DER),
        evidence=evidence,
        ephemeral_pub=eph_pub,
        nonce=os.urandom(HELLO_NONCE_LEN),
    )
    return hello, eph


def _validate_hello(
    hello: ChannelHello,
    expected_role: int,
    anchors: list[x509.Certificate],
    policy: AttestationPolicy | None,
    transport: FrameTransport,
) -> x509.Certificate:
    if hello.version != PROTOCOL_VERSION:
        _abort(transport, ABORT_NEGOTIATION, f"unsupported version {hello.version}")
        raise NegotiationFailure(f"peer speaks version {hello.version}")
    if hello.role != expected_role:
        _abort(transport, ABORT_AUTH, "unexpected peer role")
        raise AuthFailure(f"peer declared role {hello.role}, expected {expected_role}")
    try:
        cert = x509.load_der_x509_certificate(hello.certificate_der)
        cert_device_id = validate_peer_certificate(cert, anchors)
    except (AuthFailure, ParseError) as exc:
        _abort(transport, ABORT_AUTH, str(exc))
        raise AuthFailure(f"peer certificate rejected: {exc}") from exc
    if cert_device_id != hello.device_id:
        _abort(transport, ABORT_AUTH, "certificate does not bind the claimed device id")
        raise AuthFailure("hello device id does not match certificate")
    if policy is not None and not policy(hello.evidence, hello.role, hello.device_id):
        _abort(transport, ABORT_AUTH, "attestation evidence rejected")
        raise AuthFailure("attestation evidence rejected by policy")
    return cert


def _transcript_hash(client_hello: bytes, server_hello: bytes) -> bytes:
    return hashlib.sha256(client_hello + server_hello).digest()


def _transcript_preimage(role: int, transcript_hash: bytes) -> bytes:
    return _TRANSCRIPT_MAGIC + bytes([role]) + transcript_hash


def _expect_frame(transport: FrameTransport, wanted: int) -> bytes:
    frame_type, payload = transport.recv_frame()
    if frame_type == FRAME_ABORT:
        _raise_abort(payload)
    if frame_type != wanted:
        raise ParseError(f"expected frame {wanted}, got {frame_type}")
    return payload


def client_handshake(
    identity: DeviceIdentity,
    anchors: list[x509.Certificate],
    transport: FrameTransport,
    evidence: bytes = b"",
    attestation_policy: AttestationPolicy | None = None,
) -> SecureSession:
    """Verifier-side handshake: returns a mutually authenticated session."""
    hello, eph = _make_hello(identity, ROLE_VERIFIER, evidence)
    hello_bytes = hello.pack()
    transport.send_frame(FRAME_HELLO, hello_bytes)

    server_hello_bytes = _expect_frame(transport, FRAME_HELLO)
    server_hello = ChannelHello.unpack(server_hello_bytes)
    server_cert = _validate_hello(
        server_hello, ROLE_DEVICE, anchors, attestation_policy, transport
    )

    th = _transcript_hash(hello_bytes, server_hello_bytes)
    transport.send_frame(FRAME_AUTH, identity.sign(_transcript_preimage(ROLE_VERIFIER, th)))

    server_auth = _expect_frame(transport, FRAME_AUTH)
    if len(server_auth) != SIGNATURE_LEN or not verify_raw(
        server_cert.public_key(), _transcript_preimage(ROLE_DEVICE, th), server_auth
    ):
        _abort(transport, ABORT_AUTH, "transcript signature invalid")
        raise AuthFailure("server transcript signature invalid")

    send_key, recv_key = _session_keys(eph, server_hello.ephemeral_pub, th)
    return SecureSession(
        transport,
        send_key=send_key,
        recv_key=recv_key,
        send_direction=ROLE_VERIFIER,
        recv_direction=ROLE_DEVICE,
        peer_device_id=server_hello.device_id,
        peer_certificate=server_cert,
        peer_evidence=server_hello.evidence,
    )


def server_handshake(
    identity: DeviceIdentity,
    anchors: list[x509.Certificate],
    transport: FrameTransport,
    evidence: bytes = b"",
    attestation_policy: AttestationPolicy | None = None,
    replay_cache: HelloReplayCache | None = None,
) -> SecureSession:
    """Device-side handshake; mirror image of client_handshake."""
    client_hello_bytes = _expect_frame(transport, FRAME_HELLO)
    client_hello = ChannelHello.unpack(client_hello_bytes)
    if replay_cache is not None and not replay_cache.check_and_add(client_hello.nonce):
        _abort(transport, ABORT_REPLAY, "hello nonce already seen")
        raise ReplayDetected("client hello replayed")
    client_cert = _validate_hello(
        client_hello, ROLE_VERIFIER, anchors, attestation_policy, transport
    )

    hello, eph = _make_hello(identity, ROLE_DEVICE, evidence)
    hello_bytes = hello.pack()
    transport.send_frame(FRAME_HELLO, hello_bytes)

    th = _transcript_hash(client_hello_bytes, hello_bytes)
    client_auth = _expect_frame(transport, FRAME_AUTH)
    if len(client_auth) != SIGNATURE_LEN or not verify_raw(
        client_cert.public_key(), _transcript_preimage(ROLE_VERIFIER, th), client_auth
    ):
        _abort(transport, ABORT_AUTH, "transcript signature invalid")
        raise AuthFailure("client transcript signature invalid")

    transport.send_frame(FRAME_AUTH, identity.sign(_transcript_preimage(ROLE_DEVICE, th)))

    recv_key, send_key = _session_keys(eph, client_hello.ephemeral_pub, th)
    return SecureSession(
        transport,
        send_key=send_key,
        recv_key=recv_key,
        send_direction=ROLE_DEVICE,
        recv_direction=ROLE_VERIFIER,
        peer_device_id=client_hello.device_id,
        peer_certificate=client_cert,
        peer_evidence=client_hello.evidence,
    )


# Request / response messages ----------------------------------------------


@dataclass(frozen=True)
class RetrievalRequest:
    """Block range [start, end] (end=None means everything since start)."""

    device_id: bytes
    start: int
    end: int | None = None
    mode: str = "public"

    def __post_init__(self) -> None:
        if self.end is not None and self.start > self.end:
            raise InvalidParameter(f"range [{self.start}, {self.end}] is inverted")
        if self.mode not in ("public", "full"):
            raise InvalidParameter(f"unknown verification mode {self.mode!r}")

    def pack(self) -> bytes:
        end = RANGE_OPEN_END if self.end is None else self.end
        mode = MODE_FULL if self.mode == "full" else MODE_PUBLIC
        return self.device_id + struct.pack(">IIB", self.start, end, mode)

    @classmethod
    def unpack(cls, body: bytes) -> "RetrievalRequest":
        if len(body) != DEVICE_ID_LEN + 9:
            raise ParseError("malformed retrieval request")
        start, end, mode = struct.unpack_from(">IIB", body, DEVICE_ID_LEN)
        return cls(
            device_id=body[:DEVICE_ID_LEN],
            start=start,
            end=None if end == RANGE_OPEN_END else end,
            mode="full" if mode == MODE_FULL else "public",
        )


@dataclass
class TransferSummary:
    device_id: bytes
    params: ChainParams
    state: ChainState
    state_signature: bytes
    count: int
    range_start: int
    range_end: int | None
    clamped: bool = False
    notice: str | None = None

    def to_json(self) -> bytes:
        return json.dumps(
            {
                "device_id": self.device_id.hex(),
                "params": {"c": self.params.c, "m": self.params.m},
                "state": self.state.pack().hex(),
                "state_signature": self.state_signature.hex(),
                "count": self.count,
                "range": [self.range_start, self.range_end],
                "clamped": self.clamped,
                "notice": self.notice,
            }
        ).encode("utf-8")

    @classmethod
    def from_json(cls, body: bytes) -> "TransferSummary":
        try:
            doc = json.loads(body.decode("utf-8"))
            return cls(
                device_id=bytes.fromhex(doc["device_id"]),
                params=ChainParams(c=doc["params"]["c"], m=doc["params"]["m"]),
                state=ChainState.unpack(bytes.fromhex(doc["state"])),
                state_signature=bytes.fromhex(doc["state_signature"]),
                count=doc["count"],
                range_start=doc["range"][0],
                range_end=doc["range"][1],
                clamped=doc["clamped"],
                notice=doc.get("notice"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"malformed transfer summary: {exc}") from exc


def serve_range(
    session: SecureSession,
    store: SealedStore,
    request: RetrievalRequest,
    update_watermark: bool = True,
) -> int:
    """Stream the requested blocks then the signed-state summary.

    A block that fails to unseal raises the integrity alarm to the peer and
    aborts the transfer; blocks already sent remain usable.  Returns the
    number of blocks sent.
    """
    state = store.state
    if state is None:
        raise InvalidParameter("store has no chain state to serve")
    latest = state.latest_block_id
    requested_end = request.end
    notice = None
    clamped = False

    if latest is None:
        first, last = request.start, -1
        notice = "store holds no blocks"
    else:
        first = request.start
        last = latest if requested_end is None else min(requested_end, latest)
        if requested_end is not None and requested_end > latest:
            clamped = True
            notice = f"range clamped to latest committed block {latest}"
        if first > latest:
            last = first - 1
            notice = f"start {first} beyond latest committed block {latest}"

    sent = 0
    for block_id in range(first, last + 1):
        try:
            block = store.load_block(block_id)
        except Exception as exc:
            session.send_message(
                MSG_ALARM,
                json.dumps({"block_id": block_id, "reason": str(exc)}).encode("utf-8"),
            )
            raise AuthFailure(f"integrity alarm at block {block_id}: {exc}") from exc
        session.send_message(MSG_BLOCK, block.serialize())
        sent += 1

    if update_watermark and sent:
        store.mark_delivered(last)
    state, state_sig = store.signed_state_snapshot()
    summary = TransferSummary(
        device_id=store.manifest.device_id,
        params=store.params,
        state=state,
        state_signature=state_sig,
        count=sent,
        range_start=first,
        range_end=last if last >= first else None,
        clamped=clamped,
        notice=notice,
    )
    session.send_message(MSG_SUMMARY, summary.to_json())
    return sent


@dataclass
class FetchResult:
    blocks: list[Block] = field(default_factory=list)
    summary: TransferSummary | None = None
    alarms: list[dict] = field(default_factory=list)
    request: RetrievalRequest | None = None

    def block_hashes(self) -> list[str]:
        return [hashlib.sha256(b.serialize()).hexdigest() for b in self.blocks]


def receive_transfer(session: SecureSession, request: RetrievalRequest) -> FetchResult:
    """Send the request and collect block/summary/alarm messages."""
    result = FetchResult(request=request)
    session.send_message(MSG_REQUEST, request.pack())
    while True:
        try:
            msg_type, body = session.recv_message()
        except ChannelClosed:
            break
        if msg_type == MSG_BLOCK:
            result.blocks.append(Block.deserialize(body))
        elif msg_type == MSG_ALARM:
            result.alarms.append(json.loads(body.decode("utf-8")))
        elif msg_type == MSG_SUMMARY:
            result.summary = TransferSummary.from_json(body)
            break
        else:
            raise ParseError(f"unexpected message type {msg_type}")
    return result


# Device-side service and verifier-side client ------------------------------


class LogExportServer:
    """Sequential TCP export service for one sealed store."""

    def __init__(
        self,
        store: SealedStore,
        anchors: list[x509.Certificate],
        host: str = "127.0.0.1",
        port: int = 0,
        evidence: bytes = b"",
        attestation_policy: AttestationPolicy | None = None,
        update_watermark: bool = True,
    ):
        self.store = store
        self.identity = store.identity()
        self.anchors = anchors
        self.evidence = evidence
        self.attestation_policy = attestation_policy
        self.update_watermark = update_watermark
        self.replay_cache = HelloReplayCache()
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._stop = threading.Event()

    def handle_one(self, timeout: float | None = None) -> bool:
        """Accept and serve a single session; returns False on timeout."""
        self._listener.settimeout(timeout)
        try:
            conn, _ = self._listener.accept()
        except socket.timeout:
            return False
        except OSError:
            self._stop.set()  # listener closed under us
            return False
        transport = FrameTransport(conn)
        try:
            session = server_handshake(
                self.identity,
                self.anchors,
                transport,
                evidence=self.evidence,
                attestation_policy=self.attestation_policy,
                replay_cache=self.replay_cache,
            )
            msg_type, body = session.recv_message()
            if msg_type != MSG_REQUEST:
                raise ParseError(f"expected request, got message {msg_type}")
            request = RetrievalRequest.unpack(body)
            if request.device_id != self.identity.device_id:
                session.abort(ABORT_AUTH, "request names a different device")
                raise AuthFailure("request device id mismatch")
            serve_range(session, self.store, request, self.update_watermark)
        except (AuthFailure, NegotiationFailure, ReplayDetected, ParseError, ChannelClosed):
            pass  # already aborted on the wire where possible
        finally:
            transport.close()
        return True

    def serve_forever(self) -> None:
        while not self._stop.is_set():
            self.handle_one(timeout=0.2)

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> None:
        self.stop()
        self._listener.close()


def fetch(
    host: str,
    port: int,
    identity: DeviceIdentity,
    anchors: list[x509.Certificate],
    request: RetrievalRequest,
    evidence: bytes = b"",
    attestation_policy: AttestationPolicy | None = None,
) -> FetchResult:
    """Connect, authenticate mutually, and retrieve the requested range."""
    with socket.create_connection((host, port)) as sock:
        transport = FrameTransport(sock)
        session = client_handshake(
            identity,
            anchors,
            transport,
            evidence=evidence,
            attestation_policy=attestation_policy,
        )
        return receive_transfer(session, request)


# Audit ----------------------------------------------------------------------


def audit(
    result: FetchResult,
    device_certificate: x509.Certificate,
    rlk: RootLoggingKey | None = None,
    params: ChainParams | None = None,
) -> VerificationReport:
    """Verify a retrieved corpus: signatures, contiguity, summary, HMACs.

    Public mode (rlk=None) checks origin and structure; full mode
    additionally recomputes the whole hash matrix, which requires the chain
    parameters (taken from the summary when not supplied).
    """
    expected_start = result.request.start if result.request else 0
    summary = result.summary
    state = None
    report = VerificationReport(mode="full" if rlk else "public", expected_start=expected_start)

    public_key = device_certificate.public_key()
    if summary is not None:
        if params is None:
            params = summary.params
        if not verify_raw(public_key, summary.state.sign_preimage(), summary.state_signature):
            report.findings.append("state-signature-invalid")
        else:
            state = summary.state
        if result.request is not None and summary.device_id != result.request.device_id:
            report.findings.append("summary names a different device")
        if summary.count != len(result.blocks):
            report.findings.append(
                f"summary counts {summary.count} blocks, received {len(result.blocks)}"
            )
        if summary.notice:
            report.notes.append(summary.notice)
    else:
        report.notes.append("transfer ended without a summary")
    if params is None:
        if rlk is not None:
            raise InvalidParameter("full audit needs chain parameters")
        params = ChainParams(1, 1)  # never consulted on the public path

    for alarm in result.alarms:
        report.findings.append(
            f"{FINDING_INTEGRITY_ALARM}: block {alarm.get('block_id')} ({alarm.get('reason')})"
        )

    return verify_sequence(
        result.blocks, expected_start, state, rlk, public_key, params, report=report
    )


# Archives --------------------------------------------------------------------


def save_archive(path: str | Path, result: FetchResult, certificate_pem: bytes) -> None:
    """Persist a fetched corpus for offline audit."""
    doc = {
        "version": 1,
        "certificate_pem": certificate_pem.decode("ascii"),
        "request": {
            "device_id": result.request.device_id.hex() if result.request else None,
            "start": result.request.start if result.request else 0,
            "end": result.request.end if result.request else None,
            "mode": result.request.mode if result.request else "public",
        },
        "summary": json.loads(result.summary.to_json()) if result.summary else None,
        "alarms": result.alarms,
        "blocks": [base64.b64encode(b.serialize()).decode("ascii") for b in result.blocks],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_archive(path: str | Path) -> tuple[FetchResult, x509.Certificate]:
    try:
        doc = json.loads(Path(path).read_text())
        cert = x509.load_pem_x509_certificate(doc["certificate_pem"].encode("ascii"))
        request = None
        if doc["request"]["device_id"] is not None:
            request = RetrievalRequest(
                device_id=bytes.fromhex(doc["request"]["device_id"]),
                start=doc["request"]["start"],
                end=doc["request"]["end"],
                mode=doc["request"]["mode"],
            )
        summary = None
        if doc["summary"] is not None:
            summary = TransferSummary.from_json(json.dumps(doc["summary"]).encode("utf-8"))
        result = FetchResult(
            blocks=[Block.deserialize(base64.b64decode(b)) for b in doc["blocks"]],
            summary=summary,
            alarms=doc.get("alarms", []),
            request=request,
        )
        return result, cert
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed archive: {exc}") from exc
