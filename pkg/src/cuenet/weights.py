"""Weight naming, initialization, and the binary weight container.

Every model parameter has a dotted name derived from its position in the
network; :func:`expected_entries` lists them in canonical order for a given
configuration.  Initialization draws from a single seeded generator in that
order, so equal configurations produce bit-identical containers.

Container layout, all integers little-endian:

* 4-byte magic ``CWC1``, 1 byte version (1), u32 entry count
* per entry: u16 name length, UTF-8 name, u8 rank, rank u32 extents,
  u8 precision flag (0 single, 1 double), u64 absolute payload offset
* payloads: one standalone tensor-file blob per entry, concatenated

Payload blobs repeat shape and precision; loaders verify both against the
manifest.  Loading into a wider precision (single to double, exact) must be
requested explicitly; narrowing is always refused.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import ctf
from .blocks import ATTENTION_MEAA, ATTENTION_SELF
from .config import DPE_KERNEL, PATCH, TEMPORAL_KERNEL
from .errors import ConfigError, FormatError
from .tensor import dtype_of, precision_of

MAGIC = b"CWC1"
VERSION = 1
_FLAG_OF = {"single": 0, "double": 1}
_PRECISION_OF_FLAG = {0: "single", 1: "double"}


@dataclass(frozen=True)
class WeightSpec:
    """Name, extents, and initialization rule for one parameter."""

    name: str
    shape: tuple
    init: str          # zeros | ones | token | uniform
    fan_in: int = 0    # uniform rule only


def _attention_specs(prefix, kind, d):
    specs = []
    if kind == ATTENTION_SELF:
        for proj in ("wq", "wk", "wv", "fuse"):
            specs.append(WeightSpec(f"{prefix}.{proj}", (d, d), "uniform", d))
        return specs
    if kind == ATTENTION_MEAA:
        specs.append(WeightSpec(f"{prefix}.q", (1, d), "token"))
        specs.append(WeightSpec(f"{prefix}.q_ln.gamma", (d,), "ones"))
        specs.append(WeightSpec(f"{prefix}.q_ln.beta", (d,), "zeros"))
    specs.append(WeightSpec(f"{prefix}.wq", (d, d), "uniform", d))
    specs.append(WeightSpec(f"{prefix}.wk", (d, d), "uniform", d))
    specs.append(WeightSpec(f"{prefix}.w_a", (d,), "uniform", d))
    specs.append(WeightSpec(f"{prefix}.w1", (d, d), "uniform", d))
    specs.append(WeightSpec(f"{prefix}.b1", (d,), "zeros"))
    specs.append(WeightSpec(f"{prefix}.w2", (d, d), "uniform", d))
    specs.append(WeightSpec(f"{prefix}.b2", (d,), "zeros"))
    return specs


def _ln_specs(prefix, d):
    return [WeightSpec(f"{prefix}.gamma", (d,), "ones"),
            WeightSpec(f"{prefix}.beta", (d,), "zeros")]


def _ffn_specs(prefix, d, hidden):
    return [WeightSpec(f"{prefix}.w1", (d, hidden), "uniform", d),
            WeightSpec(f"{prefix}.b1", (hidden,), "zeros"),
            WeightSpec(f"{prefix}.w2", (hidden, d), "uniform", hidden),
            WeightSpec(f"{prefix}.b2", (d,), "zeros")]


def expected_entries(cfg):
    """Canonical parameter list for a configuration, in container order."""
    d, c = cfg.hidden, cfg.channels
    kt = cfg.lt_kernel
    hidden = cfg.ffn_hidden
    specs = [
        WeightSpec("backbone.conv.kernel",
                   (TEMPORAL_KERNEL, PATCH, PATCH, c, d), "uniform",
                   TEMPORAL_KERNEL * PATCH * PATCH * c),
        WeightSpec("backbone.conv.bias", (d,), "zeros"),
        WeightSpec("backbone.class_token", (1, d), "token"),
    ]
    for i, kind in enumerate(cfg.local_attention):
        base = f"local{i}"
        specs += _ln_specs(f"{base}.ln1", d)
        specs += [WeightSpec(f"{base}.lt.value", (d, d), "uniform", d),
                  WeightSpec(f"{base}.lt.kernel", (kt, 1, 1, d), "uniform",
                             kt),
                  WeightSpec(f"{base}.lt.fuse", (d, d), "uniform", d)]
        specs += _ln_specs(f"{base}.ln2", d)
        prefix = f"{base}.gs" if kind == ATTENTION_SELF else f"{base}.attn"
        specs += _attention_specs(prefix, kind, d)
        specs += _ln_specs(f"{base}.ln3", d)
        specs += _ffn_specs(f"{base}.ffn", d, hidden)
    specs.append(WeightSpec("global.dpe.kernel",
                            (DPE_KERNEL, DPE_KERNEL, DPE_KERNEL, d),
                            "uniform", DPE_KERNEL ** 3))
    specs += _ln_specs("global.ln_tokens", d)
    prefix = "global.gs" if cfg.global_attention == ATTENTION_SELF \
        else "global.attn"
    specs += _attention_specs(prefix, cfg.global_attention, d)
    specs += _ln_specs("global.ln_ffn", d)
    specs += _ffn_specs("global.ffn", d, hidden)
    specs += [WeightSpec("fusion.beta", (1, d), "zeros"),
              WeightSpec("fusion.proj", (d, cfg.num_classes), "uniform", d),
              WeightSpec("fusion.bias", (cfg.num_classes,), "zeros")]
    return specs


def param_count(cfg):
    """Total scalar parameter count for a configuration."""
    total = 0
    for spec in expected_entries(cfg):
        size = 1
        for extent in spec.shape:
            size *= extent
        total += size
    return total


@dataclass
class WeightContainer:
    """Named parameter tensors, uniform precision, insertion-ordered."""

    entries: dict
    precision: str

    def __getitem__(self, name):
        try:
            return self.entries[name]
        except KeyError:
            raise ConfigError(f"missing weight entry {name!r}") from None

    def names(self):
        return list(self.entries)


def init_weights(cfg):
    """Draw a fresh parameter set for a configuration.

    One generator seeded from the configuration, consumed in canonical entry
    order.  Linear maps use a zero-mean uniform with variance 1/fan_in;
    query and class tokens a 0.02-scaled normal; normalization gains one,
    every bias and the fusion gate zero.  Draws happen in double precision
    and are cast to the configured precision afterwards, so single and
    double containers describe the same underlying draw.
    """
    rng = np.random.default_rng(cfg.seed)
    dtype = dtype_of(cfg.precision)
    entries = {}
    for spec in expected_entries(cfg):
        if spec.init == "zeros":
            value = np.zeros(spec.shape)
        elif spec.init == "ones":
            value = np.ones(spec.shape)
        elif spec.init == "token":
            value = 0.02 * rng.standard_normal(spec.shape)
        elif spec.init == "uniform":
            limit = np.sqrt(3.0 / spec.fan_in)
            value = rng.uniform(-limit, limit, spec.shape)
        else:  # unreachable: specs are built above
            raise ConfigError(f"unknown init rule {spec.init!r}")
        entries[spec.name] = value.astype(dtype)
    return WeightContainer(entries=entries, precision=cfg.precision)


def validate_container(container, cfg):
    """Check a container holds exactly the expected entries for ``cfg``."""
    specs = {spec.name: spec for spec in expected_entries(cfg)}
    have = set(container.entries)
    missing = sorted(set(specs) - have)
    unexpected = sorted(have - set(specs))
    if missing:
        raise ConfigError(f"weights missing entries: {', '.join(missing)}")
    if unexpected:
        raise ConfigError(f"weights hold unexpected entries: "
                          f"{', '.join(unexpected)}")
    if container.precision != cfg.precision:
        raise ConfigError(f"weights are {container.precision} precision but "
                          f"the configuration wants {cfg.precision}")
    for name, spec in specs.items():
        shape = container.entries[name].shape
        if tuple(shape) != spec.shape:
            raise ConfigError(f"weight {name!r} has extents {tuple(shape)}, "
                              f"expected {spec.shape}")


def save_weights(container, path):
    """Serialize a container to ``path``."""
    names = container.names()
    blobs = []
    manifest_size = 4 + 1 + 4
    encoded = []
    for name in names:
        raw = name.encode("utf-8")
        array = container.entries[name]
        encoded.append((raw, array))
        manifest_size += 2 + len(raw) + 1 + 4 * array.ndim + 1 + 8
    offset = manifest_size
    parts = [MAGIC, struct.pack("<BI", VERSION, len(names))]
    for raw, array in encoded:
        blob = ctf.tensor_bytes(array)
        blobs.append(blob)
        flag = _FLAG_OF[container.precision]
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{array.ndim}IBQ", array.ndim,
                                 *array.shape, flag, offset))
        offset += len(blob)
    with open(path, "wb") as fh:
        for part in parts:
            fh.write(part)
        for blob in blobs:
            fh.write(blob)


def load_weights(path, precision=None, allow_widen=False):
    """Read a container from ``path``.

    With ``precision`` set, a stored precision that differs is an error
    unless it is single and ``allow_widen`` permits the exact single-to-
    double promotion.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9 or data[:4] != MAGIC:
        raise FormatError(f"bad weight container magic {data[:4]!r}")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 9
    manifest = []
    for _ in range(count):
        if len(data) - pos < 2:
            raise FormatError("weight manifest truncated")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) - pos < name_len + 1:
            raise FormatError("weight manifest truncated")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = data[pos]
        pos += 1
        if len(data) - pos < 4 * rank + 9:
            raise FormatError("weight manifest truncated")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        flag = data[pos]
        if flag not in _PRECISION_OF_FLAG:
            raise FormatError(f"weight {name!r}: unknown precision flag "
                              f"{flag}")
        (blob_offset,) = struct.unpack_from("<Q", data, pos + 1)
        pos += 9
        manifest.append((name, shape, _PRECISION_OF_FLAG[flag], blob_offset))
    entries = {}
    stored_precision = None
    for name, shape, entry_precision, blob_offset in manifest:
        if name in entries:
            raise FormatError(f"duplicate weight entry {name!r}")
        if blob_offset > len(data):
            raise FormatError(f"weight {name!r}: payload offset "
                              f"{blob_offset} beyond file end")
        array, _ = ctf.tensor_from_bytes(data, blob_offset)
        if tuple(array.shape) != tuple(shape):
            raise FormatError(f"weight {name!r}: payload extents "
                              f"{tuple(array.shape)} disagree with manifest "
                              f"{tuple(shape)}")
        if precision_of(array) != entry_precision:
            raise FormatError(f"weight {name!r}: payload precision disagrees "
                              f"with manifest {entry_precision}")
        if stored_precision is None:
            stored_precision = entry_precision
        elif stored_precision != entry_precision:
            raise FormatError("mixed precisions inside one weight container")
        entries[name] = array
    if stored_precision is None:
        raise FormatError("weight container holds no entries")
    container = WeightContainer(entries=entries, precision=stored_precision)
    if precision is not None and precision != stored_precision:
        if stored_precision == "single" and precision == "double" \
                and allow_widen:
            container = WeightContainer(
                entries={name: arr.astype(np.float64)
                         for name, arr in entries.items()},
                precision="double")
        elif stored_precision == "single" and precision == "double":
            raise ConfigError("weights are single precision; pass the widen "
                              "flag to promote them to double")
        else:
            raise ConfigError(f"weights are {stored_precision} precision and "
                              f"cannot be narrowed to {precision}")
    return container
