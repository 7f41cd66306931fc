"""Named parameter store, binary weight files, and gradient verification.

Parameters are created lazily by name. Each name draws its initial values
from its own random stream derived from (global seed, hash of name), so adding
or removing one module's parameters never changes how any other parameter is
initialized. That property is what makes ablation comparisons bit-exact.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .autodiff import Tensor
from .errors import DataError, NumericalError

_MAGIC = b"ADRW"
_VERSION = 1

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _name_stream(seed, name):
    """Independent RNG for one parameter name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key])))


class ParamStore:
    """Collection of named trainable tensors with deterministic creation.

    get() creates a parameter on first use and returns the same Tensor object
    afterwards, so modules can re-request their weights every forward pass.
    """

    def __init__(self, seed=0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params = {}

    def get(self, name, shape, init="uniform", fan_in=None):
        """Fetch or create the parameter ``name`` with the given shape.

        init is one of "uniform" (U(-b, b) with b = 1/sqrt(fan_in); fan_in
        defaults to the product of all but the leading extent), "zeros", or
        "ones". Re-requesting with a different shape is an error.
        """
        shape = tuple(int(s) for s in shape)
        if name in self._params:
            p = self._params[name]
            if p.shape != shape:
                raise ValueError(f"parameter {name!r} exists with shape {p.shape}, requested {shape}")
            return p
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            rng = _name_stream(self.seed, name)
            data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True)
        self._params[name] = p
        return p

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def count(self):
        """Total number of scalar parameters."""
        return sum(p.size for p in self._params.values())

    # -- binary weight files ----------------------------------------------

    def save(self, path, precision="f32"):
        """Write all parameters to ``path``.

        The file records names and extents but not the element type; the same
        precision string must be passed to load(). Entries are written in
        sorted name order.
        """
        if precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}")
        dt = np.dtype(_DTYPES[precision]).newbyteorder("<")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<II", _VERSION, len(self._params)))
            for name in sorted(self._params):
                p = self._params[name]
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", p.ndim))
                f.write(np.asarray(p.shape, dtype="<u8").tobytes())
                f.write(np.ascontiguousarray(p.data, dtype=dt).tobytes())

    def load(self, path, precision="f32"):
        """Read parameters saved by save() with the same precision.

        Loaded values replace existing parameters (shapes must agree) or
        create new ones; either way they are cast to the store dtype.
        """
        if precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}")
        dt = np.dtype(_DTYPES[precision]).newbyteorder("<")
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _MAGIC:
            raise DataError(f"{path}: not a weight file (bad magic {raw[:4]!r})")
        version, count = struct.unpack_from("<II", raw, 4)
        if version != _VERSION:
            raise DataError(f"{path}: unsupported weight file version {version}")
        off = 12
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = tuple(int(v) for v in np.frombuffer(raw, dtype="<u8", count=rank, offset=off))
            off += 8 * rank
            nelem = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(raw, dtype=dt, count=nelem, offset=off).reshape(shape)
            off += nelem * dt.itemsize
            arr = data.astype(self.dtype)
            if name in self._params:
                p = self._params[name]
                if p.shape != shape:
                    raise DataError(f"{path}: parameter {name!r} has shape {shape}, expected {p.shape}")
                p.data = arr
                p.grad = None
            else:
                self._params[name] = Tensor(arr, requires_grad=True)
        if off != len(raw):
            raise DataError(f"{path}: {len(raw) - off} trailing bytes after last parameter")


def grad_check(fn, store, eps=1e-4, max_elements_per_param=None, seed=0, rtol=None):
    """Compare analytic gradients of fn() against central differences.

    fn must be a zero-argument callable that rebuilds its computation from the
    store's current parameter values and returns a scalar Tensor. It is
    evaluated twice up front and must produce bit-identical values, otherwise
    a NumericalError is raised (a nondeterministic fn makes the comparison
    meaningless).

    Every parameter in the store appears in the report; when
    max_elements_per_param is set, at most that many elements of each
    parameter are probed, chosen by a seeded draw.

    Returns a dict with per-parameter entries {"max_rel_err", "checked"} under
    "params", plus the overall "max_rel_err". Relative error uses
    |a - f| / max(|a|, |f|, 1e-4).
    """
    v1 = float(fn().data)
    v2 = float(fn().data)
    if not (np.float64(v1) == np.float64(v2)):
        raise NumericalError(f"fn is not deterministic: {v1!r} vs {v2!r}")

    store.zero_grads()
    out = fn()
    out.backward()
    grads = {}
    for name, p in store.items():
        grads[name] = np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64).copy()

    rng = np.random.Generator(np.random.PCG64(seed))
    report = {"params": {}, "max_rel_err": 0.0}
    for name, p in store.items():
        n = p.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            idx = rng.choice(n, size=max_elements_per_param, replace=False)
        else:
            idx = np.arange(n)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            fp = float(fn().data)
            flat[i] = keep - eps
            fm = float(fn().data)
            flat[i] = keep
            fd = (fp - fm) / (2.0 * eps)
            an = float(grads[name].reshape(-1)[i])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
            if rel > worst:
                worst = rel
        report["params"][name] = {"max_rel_err": worst, "checked": int(len(idx))}
        report["max_rel_err"] = max(report["max_rel_err"], worst)
        if rtol is not None and worst > rtol:
            raise NumericalError(f"gradient check failed for {name!r}: rel err {worst:.3e} > {rtol:.1e}")
    return report
