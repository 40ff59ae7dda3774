"""
Append-only, tamper-evident ledger of agent behavior records.

Wire format (for third-party verifiers)
======================================

**Hash algorithm:** SHA-256 everywhere.

**Domain-separated Merkle hashing:**

- Leaf nodes:     H(0x00 || record_id)
- Internal nodes: H(0x01 || left || right)

**Tree shape:** binary; a level with an odd number of nodes duplicates its
last node before pairing, so every proof for an n-leaf block carries
ceil(log2(n)) siblings.

**Block header:** H(height || prev_hash || merkle_root || epoch) with height
and epoch as big-endian 64-bit integers. The genesis block's prev_hash is 32
zero bytes.

**Record id:** SHA-256 of the length-prefixed serialization of
(agent_id, epoch, kind, payload, timestamp, signature); the signature covers
the same fields minus the signature itself.

**Payload:** u32 entry count, then for every key in sorted order a
length-prefixed UTF-8 key and a length-prefixed compact JSON value.

Single writer; readers may query and verify concurrently once blocks are
sealed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidSignature as _BadSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from config import GENESIS_PREV_HASH, HASH_SIZE, MERKLE_LEAF_PREFIX, MERKLE_NODE_PREFIX
from .errors import (
    DuplicateRecord,
    EmptyLeaves,
    EmptyPool,
    InvalidSignature,
    LedgerError,
    LedgerFormatError,
    MalformedPayload,
    NotYetSealed,
    UnknownRecord,
)

logger = logging.getLogger(__name__)


class RecordKind(str, Enum):
    DECISION_INPUT = 'decision_input'
    SENSOR_READING = 'sensor_reading'
    ACTION_LOG = 'action_log'
    TASK_ASSIGNMENT = 'task_assignment'
    COOPERATION_OUTCOME = 'cooperation_outcome'
    COALITION_EVENT = 'coalition_event'
    REPORT = 'report'


# ---------------------------------------------------------------------------
# Hashing and canonical encoding
# ---------------------------------------------------------------------------

def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _lp(data: bytes) -> bytes:
    return struct.pack('>I', len(data)) + data


def _encode_value(value: object) -> bytes:
    try:
        text = json.dumps(value, sort_keys=True, separators=(',', ':'), allow_nan=False)
    except (TypeError, ValueError) as e:
        raise MalformedPayload(f"Payload value {value!r} is not serializable: {e}") from e
    return text.encode('utf-8')


def encode_payload(fields: Mapping[str, object]) -> bytes:
    """Serialize a key-value map canonically (sorted keys, length-prefixed values)."""
    items = []
    for key, value in fields.items():
        if not isinstance(key, str):
            raise MalformedPayload(f"Payload keys must be strings, got {key!r}")
        items.append((key, value))
    items.sort(key=lambda kv: kv[0])
    parts = [struct.pack('>I', len(items))]
    for key, value in items:
        parts.append(_lp(key.encode('utf-8')))
        parts.append(_lp(_encode_value(value)))
    return b''.join(parts)


def decode_payload(payload: bytes) -> Dict[str, object]:
    """Parse a canonical payload, rejecting anything that does not re-encode byte-exactly."""
    try:
        (count,) = struct.unpack_from('>I', payload, 0)
        offset = 4
        fields: Dict[str, object] = {}
        for _ in range(count):
            (klen,) = struct.unpack_from('>I', payload, offset)
            key = payload[offset + 4:offset + 4 + klen].decode('utf-8')
            offset += 4 + klen
            (vlen,) = struct.unpack_from('>I', payload, offset)
            raw = payload[offset + 4:offset + 4 + vlen]
            offset += 4 + vlen
            if len(raw) != vlen or key in fields:
                raise MalformedPayload("Truncated or duplicated payload entry")
            fields[key] = json.loads(raw.decode('utf-8'))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedPayload(f"Unparseable payload: {e}") from e
    if offset != len(payload) or encode_payload(fields) != payload:
        raise MalformedPayload("Payload is not in canonical form")
    return fields


def _record_body(agent_id: str, epoch: int, kind: str, payload: bytes, timestamp: int) -> bytes:
    return b''.join([
        _lp(agent_id.encode('utf-8')),
        struct.pack('>Q', epoch),
        _lp(kind.encode('utf-8')),
        _lp(payload),
        struct.pack('>Q', timestamp),
    ])


# ---------------------------------------------------------------------------
# Signing
# ---------------------------------------------------------------------------

class LedgerSigner:
    """Ed25519 identity used to sign behavior records."""

    def __init__(self, identity: str, private_key: Ed25519PrivateKey):
        self.identity = identity
        self._key = private_key

    @classmethod
    def derive(cls, seed: int, identity: str) -> "LedgerSigner":
        """Deterministic key pair from (seed, identity) so runs are reproducible."""
        secret = sha256(f"regulus:{seed}:{identity}".encode('utf-8'))
        return cls(identity, Ed25519PrivateKey.from_private_bytes(secret))

    def public_key_bytes(self) -> bytes:
        return self._key.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (_BadSignature, ValueError):
        return False


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BehaviorRecord:
    record_id: bytes
    agent_id: str
    epoch: int
    kind: RecordKind
    payload: bytes
    timestamp: int
    signature: bytes

    @classmethod
    def create(
        cls,
        signer: LedgerSigner,
        epoch: int,
        kind: RecordKind | str,
        fields: Mapping[str, object],
        timestamp: int,
    ) -> "BehaviorRecord":
        if epoch < 0 or timestamp < 0:
            raise ValueError("epoch and timestamp must be non-negative")
        kind = RecordKind(kind)
        payload = encode_payload(fields)
        message = _record_body(signer.identity, epoch, kind.value, payload, timestamp)
        signature = signer.sign(message)
        record_id = sha256(message + _lp(signature))
        return cls(record_id, signer.identity, epoch, kind, payload, timestamp, signature)

    def signing_message(self) -> bytes:
        return _record_body(self.agent_id, self.epoch, RecordKind(self.kind).value, self.payload, self.timestamp)

    def compute_id(self) -> bytes:
        """Recompute the content hash from the stored fields."""
        return sha256(self.signing_message() + _lp(self.signature))

    @property
    def fields(self) -> Dict[str, object]:
        return decode_payload(self.payload)

    def to_dict(self) -> Dict[str, object]:
        return {
            'record_id': self.record_id.hex(),
            'agent_id': self.agent_id,
            'epoch': self.epoch,
            'kind': RecordKind(self.kind).value,
            'payload': self.payload.hex(),
            'timestamp': self.timestamp,
            'signature': self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "BehaviorRecord":
        try:
            return cls(
                record_id=bytes.fromhex(str(data['record_id'])),
                agent_id=str(data['agent_id']),
                epoch=int(data['epoch']),
                kind=RecordKind(data['kind']),
                payload=bytes.fromhex(str(data['payload'])),
                timestamp=int(data['timestamp']),
                signature=bytes.fromhex(str(data['signature'])),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise LedgerFormatError(f"Malformed record entry: {e}") from e


# ---------------------------------------------------------------------------
# Merkle tree
# ---------------------------------------------------------------------------

def leaf_hash(record_id: bytes) -> bytes:
    return sha256(MERKLE_LEAF_PREFIX + record_id)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(MERKLE_NODE_PREFIX + left + right)


def _next_level(level: List[bytes]) -> List[bytes]:
    if len(level) % 2:
        level = level + [level[-1]]
    return [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]


def compute_merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        raise EmptyLeaves("Cannot build a Merkle tree without leaves")
    level = [leaf_hash(x) for x in leaves]
    while len(level) > 1:
        level = _next_level(level)
    return level[0]


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    siblings: Tuple[Tuple[bytes, str], ...]  # (hash, 'left' | 'right')

    def to_dict(self) -> Dict[str, object]:
        return {
            'leaf_index': self.leaf_index,
            'siblings': [[h.hex(), side] for h, side in self.siblings],
        }


def build_proof(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise IndexError(f"leaf index {index} out of range [0, {len(leaves)})")
    siblings: List[Tuple[bytes, str]] = []
    level = [leaf_hash(x) for x in leaves]
    idx = index
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        if idx % 2 == 0:
            siblings.append((level[idx + 1], 'right'))
        else:
            siblings.append((level[idx - 1], 'left'))
        level = _next_level(level)
        idx //= 2
    return MerkleProof(index, tuple(siblings))


def verify_proof(record_id: bytes, proof: MerkleProof, root: bytes) -> bool:
    """True iff replaying the proof from the leaf hash reproduces root."""
    current = leaf_hash(record_id)
    for sibling, side in proof.siblings:
        if side == 'left':
            current = node_hash(sibling, current)
        elif side == 'right':
            current = node_hash(current, sibling)
        else:
            return False
    return current == root


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def compute_header_hash(height: int, prev_hash: bytes, merkle_root: bytes, epoch: int) -> bytes:
    return sha256(struct.pack('>Q', height) + prev_hash + merkle_root + struct.pack('>Q', epoch))


@dataclass
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    epoch: int
    record_ids: List[bytes]
    header_hash: bytes

    def to_dict(self) -> Dict[str, object]:
        return {
            'height': self.height,
            'prev_hash': self.prev_hash.hex(),
            'merkle_root': self.merkle_root.hex(),
            'epoch': self.epoch,
            'record_ids': [r.hex() for r in self.record_ids],
            'header_hash': self.header_hash.hex(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "Block":
        try:
            block = cls(
                height=int(data['height']),
                prev_hash=bytes.fromhex(str(data['prev_hash'])),
                merkle_root=bytes.fromhex(str(data['merkle_root'])),
                epoch=int(data['epoch']),
                record_ids=[bytes.fromhex(r) for r in data['record_ids']],
                header_hash=bytes.fromhex(str(data['header_hash'])),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise LedgerFormatError(f"Malformed block header: {e}") from e
        if len(block.prev_hash) != HASH_SIZE or len(block.header_hash) != HASH_SIZE:
            raise LedgerFormatError(f"Block {block.height} carries hashes of the wrong size")
        return block


@dataclass(frozen=True)
class Violation:
    height: int
    kind: str  # 'header_hash' | 'prev_link' | 'merkle_root'
    detail: str

    def __str__(self) -> str:
        return f"block {self.height}: {self.kind} - {self.detail}"


@dataclass(frozen=True)
class QueryFilter:
    agent_id: Optional[str] = None
    epoch_range: Optional[Tuple[int, int]] = None  # inclusive
    kind: Optional[RecordKind | str] = None

    def matches(self, record: BehaviorRecord) -> bool:
        if self.agent_id is not None and record.agent_id != self.agent_id:
            return False
        if self.epoch_range is not None and not self.epoch_range[0] <= record.epoch <= self.epoch_range[1]:
            return False
        if self.kind is not None and RecordKind(record.kind) != RecordKind(self.kind):
            return False
        return True


@dataclass
class LedgerIndex:
    by_agent: Dict[str, List[bytes]] = field(default_factory=dict)
    by_epoch: Dict[int, List[bytes]] = field(default_factory=dict)

    def add(self, record: BehaviorRecord) -> None:
        self.by_agent.setdefault(record.agent_id, []).append(record.record_id)
        self.by_epoch.setdefault(record.epoch, []).append(record.record_id)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

class Ledger:
    """
    In-process blockchain data layer: pending pool, sealed blocks, indexes.
    """

    def __init__(self):
        self._keys: Dict[str, bytes] = {}
        self._records: Dict[bytes, BehaviorRecord] = {}
        self._sequence: Dict[bytes, int] = {}
        self._pending: List[bytes] = []
        self._blocks: List[Block] = []
        self._location: Dict[bytes, Tuple[int, int]] = {}
        self.index = LedgerIndex()

    # --- identities ---

    def register_key(self, agent_id: str, public_key: bytes) -> None:
        existing = self._keys.get(agent_id)
        if existing is not None and existing != public_key:
            raise LedgerError(f"[ledger] {agent_id} already has a different registered key")
        self._keys[agent_id] = public_key

    def public_key(self, agent_id: str) -> Optional[bytes]:
        return self._keys.get(agent_id)

    @property
    def keys(self) -> Dict[str, bytes]:
        return dict(self._keys)

    # --- accessors ---

    def __len__(self) -> int:
        return len(self._records)

    def contains(self, record_id: bytes) -> bool:
        return record_id in self._records

    def record(self, record_id: bytes) -> BehaviorRecord:
        try:
            return self._records[record_id]
        except KeyError:
            raise UnknownRecord(f"Record {record_id.hex()[:16]} is not on the ledger") from None

    @property
    def blocks(self) -> List[Block]:
        return list(self._blocks)

    def block(self, height: int) -> Block:
        return self._blocks[height]

    @property
    def pending(self) -> List[bytes]:
        return list(self._pending)

    @property
    def height(self) -> int:
        return len(self._blocks)

    def is_sealed(self, record_id: bytes) -> bool:
        return record_id in self._location

    def block_of(self, record_id: bytes) -> Block:
        self.record(record_id)
        if record_id not in self._location:
            raise NotYetSealed(f"Record {record_id.hex()[:16]} is still in the pending pool")
        return self._blocks[self._location[record_id][0]]

    # --- writes ---

    def append_record(self, record: BehaviorRecord) -> bytes:
        if record.record_id in self._records:
            raise DuplicateRecord(f"Record {record.record_id.hex()[:16]} already on the ledger")
        key = self._keys.get(record.agent_id)
        if key is None or not verify_signature(key, record.signing_message(), record.signature):
            raise InvalidSignature(f"Signature of {record.agent_id} does not verify")
        if record.compute_id() != record.record_id:
            raise MalformedPayload("record_id does not match the record content")
        decode_payload(record.payload)

        self._records[record.record_id] = record
        self._sequence[record.record_id] = len(self._sequence)
        self._pending.append(record.record_id)
        self.index.add(record)
        logger.debug(f"[ledger] appended {record.kind.value} from {record.agent_id} (epoch {record.epoch})")
        return record.record_id

    def seal_block(self, epoch: int) -> Block:
        if not self._pending:
            raise EmptyPool("No pending records to seal")
        record_ids = list(self._pending)
        root = compute_merkle_root(record_ids)
        height = len(self._blocks)
        prev_hash = self._blocks[-1].header_hash if self._blocks else GENESIS_PREV_HASH
        block = Block(
            height=height,
            prev_hash=prev_hash,
            merkle_root=root,
            epoch=epoch,
            record_ids=record_ids,
            header_hash=compute_header_hash(height, prev_hash, root, epoch),
        )
        self._blocks.append(block)
        for i, rid in enumerate(record_ids):
            self._location[rid] = (height, i)
        self._pending.clear()
        logger.info(f"[ledger] sealed block {height} (epoch {epoch}, {len(record_ids)} records)")
        return block

    # --- proofs and verification ---

    def prove_inclusion(self, record_id: bytes) -> MerkleProof:
        block = self.block_of(record_id)
        return build_proof(block.record_ids, self._location[record_id][1])

    verify_proof = staticmethod(verify_proof)

    def has_valid_proof(self, record_id: bytes) -> bool:
        try:
            block = self.block_of(record_id)
        except (UnknownRecord, NotYetSealed):
            return False
        return verify_proof(record_id, self.prove_inclusion(record_id), block.merkle_root)

    def verify_chain(self) -> List[Violation]:
        """Recompute headers, linkage, and Merkle roots from stored content."""
        violations: List[Violation] = []
        expected_prev = GENESIS_PREV_HASH
        anchored = True
        for block in self._blocks:
            h = block.height
            recomputed = compute_header_hash(block.height, block.prev_hash, block.merkle_root, block.epoch)
            if recomputed != block.header_hash:
                violations.append(Violation(h, 'header_hash', "stored header hash does not match header fields"))
            if block.prev_hash != expected_prev:
                violations.append(Violation(h, 'prev_link', f"prev_hash does not match block {h - 1}"))
                anchored = False
            elif not anchored:
                violations.append(Violation(h, 'prev_link', "chain broken upstream"))
            try:
                root = compute_merkle_root([self._records[rid].compute_id() for rid in block.record_ids])
            except (KeyError, EmptyLeaves):
                root = None
            if root != block.merkle_root:
                violations.append(Violation(h, 'merkle_root', "merkle_root does not match stored records"))
            expected_prev = recomputed
        return violations

    # --- queries ---

    def query(self, flt: Optional[QueryFilter] = None, **criteria) -> List[BehaviorRecord]:
        """All sealed records matching every given predicate, in append order."""
        flt = flt or QueryFilter(**criteria)
        candidates: Optional[set] = None
        if flt.agent_id is not None:
            candidates = set(self.index.by_agent.get(flt.agent_id, ()))
        if flt.epoch_range is not None:
            lo, hi = flt.epoch_range
            in_range = {rid for epoch, rids in self.index.by_epoch.items() if lo <= epoch <= hi for rid in rids}
            candidates = in_range if candidates is None else candidates & in_range
        if candidates is None:
            candidates = set(self._location)
        kind = RecordKind(flt.kind) if flt.kind is not None else None
        selected = [
            rid for rid in candidates
            if rid in self._location and (kind is None or self._records[rid].kind == kind)
        ]
        selected.sort(key=self._sequence.__getitem__)
        return [self._records[rid] for rid in selected]

    def records_in_order(self) -> List[BehaviorRecord]:
        return sorted(self._records.values(), key=lambda r: self._sequence[r.record_id])

    # --- export support ---

    @classmethod
    def restore(
        cls,
        keys: Mapping[str, bytes],
        records: Iterable[BehaviorRecord],
        blocks: Iterable[Block],
    ) -> "Ledger":
        """Rebuild a ledger from exported parts; callers run verify_chain."""
        ledger = cls()
        ledger._keys = dict(keys)
        for record in records:
            if record.record_id in ledger._records:
                raise LedgerFormatError(f"Duplicate record {record.record_id.hex()[:16]} in export")
            ledger._records[record.record_id] = record
            ledger._sequence[record.record_id] = len(ledger._sequence)
            ledger.index.add(record)
        for position, block in enumerate(blocks):
            if block.height != position:
                raise LedgerFormatError(f"Block at position {position} claims height {block.height}")
            for i, rid in enumerate(block.record_ids):
                if rid not in ledger._records:
                    raise LedgerFormatError(f"Block {block.height} references a missing record")
                ledger._location[rid] = (block.height, i)
            ledger._blocks.append(block)
        ledger._pending = [rid for rid in ledger._records if rid not in ledger._location]
        return ledger
