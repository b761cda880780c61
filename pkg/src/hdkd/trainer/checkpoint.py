"""Checkpoint container: a JSON manifest followed by named tensor records."""
from __future__ import annotations

import json
import struct

from .. import models as M
from .. import tensor as T

CKPT_MAGIC = b"HDKDC"
CKPT_VERSION = 1


def save_checkpoint(path: str, model, manifest: dict) -> None:
    state = model.state_dict()
    manifest = dict(manifest)
    manifest.setdefault("kind", "student" if isinstance(model, M.Student) else "teacher")
    manifest.setdefault("spec", M.format_spec(model.spec))
    manifest.setdefault("spec_hash", M.spec_hash(model.spec))
    manifest.setdefault("num_classes", model.num_classes)
    meta = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(meta)) + meta)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw + T.dumps_array(arr))


def read_checkpoint(path: str) -> tuple[dict, dict]:
    """Return ``(state, manifest)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, mlen = struct.unpack_from("<HI", buf, 5)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 11
    manifest = json.loads(buf[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nlen].decode()
        state[name], pos = T.loads_array(buf, pos + 2 + nlen)
    return state, manifest


def load_model(path: str):
    """Rebuild a teacher or student from a checkpoint; returns ``(model, manifest)``."""
    state, manifest = read_checkpoint(path)
    spec = M.parse_spec(manifest["spec"])
    if manifest["kind"] == "teacher":
        model = M.build_teacher(spec, manifest["num_classes"], manifest.get("seed", 0))
    else:
        model = M.build_student(spec, manifest["num_classes"], manifest.get("seed", 0))
    model.load_state_dict(state)
    return model.eval(), manifest
