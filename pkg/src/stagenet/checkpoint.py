"""Stage checkpoints and pseudo-logit stores on disk.

Checkpoint container layout:

    magic "SNCK1\\n" | uint32 manifest byte length | manifest JSON (utf-8)
    | payload: concatenated raw little-endian float32 arrays

The manifest records every array's (section, group, index, shape, offset)
plus a sha256 of the payload, the stage index, seed, best validation error,
frozen group names, and the producing config hash.  Loading verifies the
payload hash, so silent corruption surfaces as an integrity error.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import ParamSet, ShapeError, Tensor, ValidationError

MAGIC = b"SNCK1\n"


class IntegrityError(ValidationError):
    """Checkpoint or store contents do not match their recorded hash."""


@dataclass
class StageCheckpoint:
    """Everything one stage hands to the next (and to evaluation)."""

    stage: int
    params: ParamSet
    val_error: float
    seed: int
    fisher: dict | None = None    # group name -> list of arrays over theta_s U theta_n
    anchor: dict | None = None    # same alignment as fisher
    config_hash: str = ""

    def __post_init__(self):
        if self.stage < 1:
            raise ValidationError(f"stage index must be >= 1, got {self.stage}")
        for blob, label in ((self.fisher, "fisher"), (self.anchor, "anchor")):
            if blob is None:
                continue
            for name, arrays in blob.items():
                group = self.params.group(name)
                if len(group) != len(arrays):
                    raise ShapeError(f"{label}[{name}]: {len(arrays)} arrays for {len(group)} tensors")
                for t, a in zip(group, arrays):
                    if t.data.shape != a.shape:
                        raise ShapeError(f"{label}[{name}]: shape {a.shape} vs {t.data.shape}")
                if label == "fisher" and any(np.any(a < 0) for a in arrays):
                    raise ValidationError("fisher entries must be nonnegative")


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4")


def save_checkpoint(path, ckpt):
    payload = bytearray()
    entries = []

    def put(section, group, index, arr):
        raw = _f32(arr).tobytes()
        entries.append({
            "section": section, "group": group, "index": index,
            "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw),
        })
        payload.extend(raw)

    for name, tensors in ckpt.params.groups.items():
        for i, t in enumerate(tensors):
            put("params", name, i, t.data)
    for section, blob in (("fisher", ckpt.fisher), ("anchor", ckpt.anchor)):
        if blob is not None:
            for name, arrays in blob.items():
                for i, a in enumerate(arrays):
                    put(section, name, i, a)

    manifest = {
        "format": "stagenet-checkpoint-v1",
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "val_error": ckpt.val_error,
        "config_hash": ckpt.config_hash,
        "frozen": sorted(ckpt.params.frozen),
        "group_order": list(ckpt.params.groups),
        "has_fisher": ckpt.fisher is not None,
        "has_anchor": ckpt.anchor is not None,
        "entries": entries,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: manifest unreadable ({exc})") from None
    payload = raw[start + mlen:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise IntegrityError(f"{path}: payload hash mismatch")

    def pull(entry):
        o, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[o:o + n], dtype="<f4").reshape(entry["shape"])
        return arr.astype(np.float32, copy=True)

    groups = {name: [] for name in manifest["group_order"]}
    fisher = {} if manifest["has_fisher"] else None
    anchor = {} if manifest["has_anchor"] else None
    for entry in manifest["entries"]:
        arr = pull(entry)
        if entry["section"] == "params":
            groups[entry["group"]].append((entry["index"], arr))
        elif entry["section"] == "fisher":
            fisher.setdefault(entry["group"], []).append((entry["index"], arr))
        else:
            anchor.setdefault(entry["group"], []).append((entry["index"], arr))

    params = ParamSet()
    for name in manifest["group_order"]:
        tensors = [Tensor(a, requires_grad=True) for _, a in sorted(groups[name])]
        params.add_group(name, tensors)
    for name in manifest["frozen"]:
        params.freeze(name)
    for blob in (fisher, anchor):
        if blob is not None:
            for name in blob:
                blob[name] = [a for _, a in sorted(blob[name])]

    return StageCheckpoint(
        stage=manifest["stage"], params=params, val_error=manifest["val_error"],
        seed=manifest["seed"], fisher=fisher, anchor=anchor,
        config_hash=manifest["config_hash"],
    )


def checkpoint_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# pseudo-logit store


def _fmt(v):
    # shortest decimal that round-trips the float32 exactly
    return np.format_float_positional(np.float32(v), unique=True, trim="0")


@dataclass(frozen=True)
class PseudoLogitStore:
    """Per-example target logits for each preserved head, plus provenance."""

    stage: int
    checkpoint_hash: str
    logits: dict  # example id -> {head name -> float32 vector}

    def heads(self):
        first = next(iter(self.logits.values()), {})
        return sorted(first)

    def get(self, example_id, head):
        try:
            return self.logits[int(example_id)][head]
        except KeyError:
            raise ValidationError(
                f"no stored logits for example {example_id}, head '{head}'") from None

    def batch(self, ids, head):
        return np.stack([self.get(e, head) for e in ids])


def save_pseudo_logits(path, store):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# stage={store.stage} checkpoint={store.checkpoint_hash}\n")
        fh.write("example_id,head_id,logits...\n")
        for eid in sorted(store.logits):
            for head in sorted(store.logits[eid]):
                vec = store.logits[eid][head]
                fh.write(f"{eid},{head}," + ",".join(_fmt(v) for v in vec) + "\n")


def load_pseudo_logits(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# stage="):
            raise IntegrityError(f"{path}: missing provenance header")
        ref = dict(part.split("=", 1) for part in header[2:].split(" "))
        fh.readline()  # column header
        logits = {}
        for line in fh:
            cells = line.rstrip("\n").split(",")
            eid, head = int(cells[0]), cells[1]
            vec = np.array([np.float32(v) for v in cells[2:]], dtype=np.float32)
            logits.setdefault(eid, {})[head] = vec
    return PseudoLogitStore(stage=int(ref["stage"]), checkpoint_hash=ref["checkpoint"],
                            logits=logits)
