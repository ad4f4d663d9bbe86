"""Parameter checkpoints: a plain-text manifest followed by little-endian float32 data.

Layout::

    omega-seg checkpoint 1
    meta <key> <value>            (zero or more)
    tensor <name> <d0>x<d1>... <byte offset>
    ...
    end
    <raw float32 bytes>

Offsets are relative to the first byte after the ``end`` line.
"""

from pathlib import Path

import numpy as np

MAGIC = "omega-seg checkpoint 1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors, meta=None):
    """tensors: ordered mapping name -> array; meta: mapping of str -> str."""
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in str(k)) or "\n" in str(v):
            raise CheckpointError(f"bad meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=DTYPE)
        dims = "x".join(str(d) for d in a.shape) or "scalar"
        lines.append(f"tensor {name} {dims} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("end")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_tensors(path):
    """Returns (ordered dict name -> float32 array, meta dict)."""
    data = Path(path).read_bytes()
    tensors, meta = {}, {}
    pos = 0
    entries = []
    first = True
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            first = False
            continue
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "tensor":
            name, dims, off = rest.split(" ")
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            entries.append((name, shape, int(off)))
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    body = data[pos:]
    for name, shape, off in entries:
        count = int(np.prod(shape)) if shape else 1
        if off + count * DTYPE.itemsize > len(body):
            raise CheckpointError(f"{path}: data for {name} is truncated")
        tensors[name] = np.frombuffer(body, DTYPE, count, off).reshape(shape).copy()
    return tensors, meta


def store_tensors(store):
    """Parameters followed by batch-norm running statistics."""
    out = {name: t.data for name, t in store.params.items()}
    for name, st in store.bn.items():
        out[f"{name}.running_mean"] = st.mean
        out[f"{name}.running_var"] = st.var
        out[f"{name}.initialized"] = np.array([float(st.initialized)])
    return out


def save_checkpoint(path, store, meta=None):
    write_tensors(path, store_tensors(store), meta)


def load_into(store, tensors, path="checkpoint"):
    """Copy tensors into a store of identical structure; mismatches raise."""
    expected = store_tensors(store)
    if list(expected) != list(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: parameters do not match the configured network "
                              f"(missing {missing[:5]}, unexpected {extra[:5]})")
    for name, arr in expected.items():
        if np.shape(arr) != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, "
                                  f"network expects {np.shape(arr)}")
    for name, t in store.params.items():
        t.data = tensors[name].astype(store.dtype)
    for name, st in store.bn.items():
        st.mean = tensors[f"{name}.running_mean"].copy()
        st.var = tensors[f"{name}.running_var"].copy()
        st.initialized = bool(tensors[f"{name}.initialized"][0])


def load_checkpoint(path, store):
    tensors, meta = read_tensors(path)
    load_into(store, tensors, path)
    return meta


def save_optimizer(path, adam, meta=None):
    tensors = {}
    for name in adam.m:
        tensors[f"m.{name}"] = adam.m[name]
        tensors[f"v.{name}"] = adam.v[name]
    meta = dict(meta or {})
    meta["adam_t"] = str(adam.t)
    write_tensors(path, tensors, meta)


def load_optimizer(path, adam):
    tensors, meta = read_tensors(path)
    state = {"t": int(meta["adam_t"]), "m": {}, "v": {}}
    for name in adam.m:
        try:
            state["m"][name] = tensors[f"m.{name}"]
            state["v"][name] = tensors[f"v.{name}"]
        except KeyError:
            raise CheckpointError(f"{path}: optimizer state lacks {name}") from None
    adam.load_state_dict(state)
    return meta
