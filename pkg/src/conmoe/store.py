"""Bit-exact file formats: `.mckpt` checkpoints, `.plan.json` plans, and
`.stats.json` calibration statistics.

A checkpoint is a single file: canonical UTF-8 JSON header, one newline,
an 8-byte little-endian payload length, then the raw float32
little-endian tensor payload. Everything JSON is serialized canonically
(sorted keys, compact separators) so identical values produce identical
bytes.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .calibration import CalibStats, ExpertStats
from .model import ExpertWeights, MoELayer, MoEModel, ModelSpec
from .plan import PLAN_VERSION, ConsolidationPlan, Scope

MAGIC = "MCKPT1"
STATS_VERSION = 1

_TENSOR_NAME = re.compile(
    r"^layers\.(\d+)\.(?:experts\.(\d+)\.(gate|up|down)|router)$"
)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse_tensor_name(name: str) -> tuple[int, int | None, str | None]:
    """Returns (layer, expert, projection); expert/projection are None for
    router tensors. Rejects anything outside the naming grammar."""
    m = _TENSOR_NAME.match(name)
    if not m:
        raise ValueError(f"invalid tensor name: {name!r}")
    layer = int(m.group(1))
    if m.group(2) is None:
        return layer, None, None
    return layer, int(m.group(2)), m.group(3)


def _tensor_order(spec: ModelSpec):
    """Canonical tensor iteration: per layer, experts (gate/up/down) then
    the router."""
    for l in range(spec.num_layers):
        for i in range(spec.num_experts):
            for proj in ("gate", "up", "down"):
                yield f"layers.{l}.experts.{i}.{proj}", (l, i, proj)
        yield f"layers.{l}.router", (l, None, None)


def write_checkpoint(model: MoEModel, path) -> None:
    model.validate()
    if model.spec.num_layers == 0:
        raise ValueError("empty model")

    def tensor_for(l, i, proj):
        if i is None:
            return model.layers[l].router
        return getattr(model.layers[l].experts[i], proj)

    index = []
    chunks = []
    offset = 0
    for name, (l, i, proj) in _tensor_order(model.spec):
        arr = np.ascontiguousarray(tensor_for(l, i, proj), dtype="<f4")
        index.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "magic": MAGIC,
        "spec": model.spec.to_dict(),
        "tensor_index": index,
        "metadata": model.metadata,
    }
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(canonical_json(header))
        f.write(b"\n")
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)


def read_checkpoint(path) -> MoEModel:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError("malformed header: no newline terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed header: {exc}") from None
    if header.get("magic") != MAGIC:
        raise ValueError("bad magic")
    spec = ModelSpec.from_dict(header["spec"])
    if len(raw) < nl + 9:
        raise ValueError("payload length mismatch")
    (declared_len,) = struct.unpack("<Q", raw[nl + 1 : nl + 9])
    payload = raw[nl + 9 :]
    if len(payload) != declared_len:
        raise ValueError("payload length mismatch")

    index = header["tensor_index"]
    expected = {name: key for name, key in _tensor_order(spec)}
    seen: set[str] = set()
    offset = 0
    tensors: dict[str, np.ndarray] = {}
    for entry in index:
        name, shape, byte_offset = entry[0], tuple(int(x) for x in entry[1]), int(entry[2])
        parse_tensor_name(name)
        if name in seen:
            raise ValueError(f"duplicate tensor entry: {name}")
        seen.add(name)
        if name not in expected:
            raise ValueError(f"tensor {name!r} not declared by spec")
        if byte_offset != offset:
            raise ValueError("shape/offset mismatch: non-contiguous tensor index")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if byte_offset + nbytes > declared_len:
            raise ValueError("shape/offset mismatch: tensor exceeds payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=byte_offset)
        tensors[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != declared_len:
        raise ValueError("shape/offset mismatch: payload not fully covered")
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"missing tensor entries: {sorted(missing)[:3]}")

    layers = []
    for l in range(spec.num_layers):
        experts = [
            ExpertWeights(
                gate=tensors[f"layers.{l}.experts.{i}.gate"],
                up=tensors[f"layers.{l}.experts.{i}.up"],
                down=tensors[f"layers.{l}.experts.{i}.down"],
            )
            for i in range(spec.num_experts)
        ]
        layers.append(MoELayer(experts=experts, router=tensors[f"layers.{l}.router"]))
    model = MoEModel(spec=spec, layers=layers, metadata=header.get("metadata", {}))
    model.validate()
    return model


def _ref_to_list(ref) -> list[int]:
    return [int(ref[0]), int(ref[1])]


def _ref_from_list(v) -> tuple[int, int]:
    if len(v) != 2:
        raise ValueError(f"bad expert reference: {v!r}")
    return (int(v[0]), int(v[1]))


def plan_to_dict(plan: ConsolidationPlan) -> dict:
    return {
        "version": plan.version,
        "rho": plan.rho,
        "scope_size": plan.scope_size,
        "policy": plan.policy,
        "scopes": [
            {
                "layers": list(scope.layers),
                "prototypes": [_ref_to_list(p) for p in scope.prototypes],
            }
            for scope in plan.scopes
        ],
        "assignment": [
            [_ref_to_list(slot), _ref_to_list(plan.assignment[slot])]
            for slot in sorted(plan.assignment)
        ],
        "drop_mask": [_ref_to_list(r) for r in sorted(plan.drop_mask)],
        "metadata": plan.metadata,
    }


def plan_from_dict(d: dict) -> ConsolidationPlan:
    version = int(d["version"])
    if version > PLAN_VERSION:
        raise ValueError(f"unsupported plan version: {version}")
    plan = ConsolidationPlan(
        rho=float(d["rho"]),
        scope_size=int(d["scope_size"]),
        policy=str(d["policy"]),
        scopes=[
            Scope(
                layers=[int(l) for l in s["layers"]],
                prototypes=[_ref_from_list(p) for p in s["prototypes"]],
            )
            for s in d["scopes"]
        ],
        assignment={
            _ref_from_list(slot): _ref_from_list(target)
            for slot, target in d["assignment"]
        },
        drop_mask={_ref_from_list(r) for r in d.get("drop_mask", [])},
        metadata=d.get("metadata", {}),
        version=version,
    )
    plan.validate()
    return plan


def write_plan(plan: ConsolidationPlan, path) -> None:
    plan.validate()
    Path(path).write_bytes(canonical_json(plan_to_dict(plan)) + b"\n")


def read_plan(path) -> ConsolidationPlan:
    return plan_from_dict(json.loads(Path(path).read_text("utf-8")))


def stats_to_dict(stats: CalibStats) -> dict:
    return {
        "version": STATS_VERSION,
        "token_total": stats.token_total,
        "top_k": stats.top_k,
        "experts": [
            {
                "ref": _ref_to_list(ref),
                "routed_count": rec.routed_count,
                "sum_weighted_norm": rec.sum_weighted_norm,
                "topk_count": rec.topk_count,
            }
            for ref, rec in sorted(stats.records.items())
        ],
        "metadata": stats.metadata,
    }


def stats_from_dict(d: dict) -> CalibStats:
    version = int(d["version"])
    if version > STATS_VERSION:
        raise ValueError(f"unsupported stats version: {version}")
    records = {}
    for rec in d["experts"]:
        ref = _ref_from_list(rec["ref"])
        if ref in records:
            raise ValueError(f"duplicate stats record for {ref}")
        records[ref] = ExpertStats(
            routed_count=int(rec["routed_count"]),
            sum_weighted_norm=float(rec["sum_weighted_norm"]),
            topk_count=int(rec["topk_count"]),
        )
    stats = CalibStats(
        token_total=int(d["token_total"]),
        top_k=int(d["top_k"]),
        records=records,
        metadata=d.get("metadata", {}),
    )
    stats.validate()
    return stats


def write_stats(stats: CalibStats, path) -> None:
    stats.validate()
    Path(path).write_bytes(canonical_json(stats_to_dict(stats)) + b"\n")


def read_stats(path) -> CalibStats:
    return stats_from_dict(json.loads(Path(path).read_text("utf-8")))
