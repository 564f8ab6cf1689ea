"""Bilinearly-coupled energy over a partitioned state.

The state ``x`` of length ``D`` is laid out as ``[input | hidden | output]``
and, independently, split into ``L`` contiguous physical modules.  The energy is

    E(x) = sum_i (a_i x_i^2 / 2 + kappa_i x_i^4 / 4 - b0_i x_i)
           + sum_{m < m'} (x^(m) . U_mm') (V_mm' . x^(m'))

Every evaluation goes through the factors, so the dense coupling matrices are
never formed outside of the Hessian/oracle helpers.  All state-valued functions
accept a single state ``(D,)`` or a stack ``(..., D)``.

Parameter vector ``theta`` (canonical order): couplings sorted by ``(m, m')``,
for each one ``U`` flattened column-major then ``V`` flattened column-major,
followed by the trainable biases in coordinate order.  Biases are trainable on
free (hidden and output) coordinates only; a bias on a clamped coordinate has no
effect on any equilibrium.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_FLOOR = 0.1


class SubstrateError(ValueError):
    """Raised for malformed substrates or inputs of the wrong shape."""


class StiffnessError(SubstrateError):
    """The free Hessian at the clamped origin is softer than ``lambda_floor``."""

    def __init__(self, lambda_min, lambda_floor, eigenvalues):
        self.lambda_min = float(lambda_min)
        self.lambda_floor = float(lambda_floor)
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(
            f"free Hessian at clamped origin has lambda_min={self.lambda_min:.6g} "
            f"< lambda_floor={self.lambda_floor:.6g}"
        )

    def report(self):
        ev = np.sort(self.eigenvalues)
        return {
            "lambda_min": self.lambda_min,
            "lambda_floor": self.lambda_floor,
            "lambda_max": float(ev[-1]),
            "lowest_eigenvalues": [float(e) for e in ev[:5]],
        }


@lru_cache(maxsize=None)
def _module_slices(sizes):
    edges = np.concatenate([[0], np.cumsum(sizes)]).tolist()
    return tuple(slice(a, b) for a, b in zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class BlockPartition:
    input_dim: int
    hidden_dim: int
    output_dim: int
    module_sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "module_sizes", tuple(int(s) for s in self.module_sizes))
        dims = (self.input_dim, self.hidden_dim, self.output_dim)
        if min(dims) < 0 or self.input_dim == 0 or self.output_dim == 0:
            raise SubstrateError(f"invalid block sizes {dims}")
        if len(self.module_sizes) < 2:
            raise SubstrateError("need at least two modules")
        if min(self.module_sizes) < 1:
            raise SubstrateError("module sizes must be positive")
        if sum(self.module_sizes) != sum(dims):
            raise SubstrateError(
                f"module sizes sum to {sum(self.module_sizes)}, blocks sum to {sum(dims)}"
            )

    @property
    def dim(self):
        return self.input_dim + self.hidden_dim + self.output_dim

    @property
    def n_modules(self):
        return len(self.module_sizes)

    @property
    def input_slice(self):
        return slice(0, self.input_dim)

    @property
    def hidden_slice(self):
        return slice(self.input_dim, self.input_dim + self.hidden_dim)

    @property
    def output_slice(self):
        return slice(self.input_dim + self.hidden_dim, self.dim)

    @property
    def free_slice(self):
        """Hidden and output coordinates (contiguous by layout)."""
        return slice(self.input_dim, self.dim)

    @property
    def free_dim(self):
        return self.hidden_dim + self.output_dim

    def module_slice(self, m):
        return _module_slices(self.module_sizes)[m]

    def block_of(self, i):
        if i < self.input_dim:
            return "I"
        if i < self.input_dim + self.hidden_dim:
            return "H"
        return "O"

    def module_of(self, i):
        return int(np.searchsorted(np.cumsum(self.module_sizes), i, side="right"))

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "module_sizes": list(self.module_sizes),
        }


@dataclass(frozen=True, eq=False)
class LowRankCoupling:
    source: int
    target: int
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise SubstrateError(f"factor shapes {u.shape}, {v.shape} are incompatible")
        if not self.source < self.target:
            raise SubstrateError(f"coupling ({self.source}, {self.target}) must have m < m'")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def rank(self):
        return self.u.shape[1]

    @property
    def n_params(self):
        return self.u.size + self.v.size

    def dense(self):
        """Realized ``W = U V^T``; oracle and Hessian use only."""
        return self.u @ self.v.T


@dataclass(frozen=True, eq=False)
class BaseEnergy:
    stiffness: np.ndarray
    bias: np.ndarray
    quartic: np.ndarray

    def __post_init__(self):
        a, b0, kappa = (np.array(z, dtype=float) for z in (self.stiffness, self.bias, self.quartic))
        if not (a.shape == b0.shape == kappa.shape) or a.ndim != 1:
            raise SubstrateError("stiffness, bias and quartic must be 1-D of equal length")
        if np.any(a <= 0):
            raise SubstrateError("stiffness must be strictly positive")
        if np.any(kappa < 0):
            raise SubstrateError("quartic coefficients must be nonnegative")
        for name, arr in (("stiffness", a), ("bias", b0), ("quartic", kappa)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @cached_property
    def has_quartic(self):
        return bool(np.any(self.quartic))

    @classmethod
    def uniform(cls, dim, stiffness=1.0, bias=0.0, quartic=0.0):
        return cls(np.full(dim, stiffness, float), np.full(dim, bias, float), np.full(dim, quartic, float))


@dataclass(frozen=True, eq=False)
class SubstrateSpec:
    partition: BlockPartition
    base: BaseEnergy
    couplings: tuple
    train_u: bool = True
    train_v: bool = True
    train_bias: bool = True
    lambda_floor: float = DEFAULT_LAMBDA_FLOOR
    _lambda_min: float = field(default=np.nan, repr=False)

    def __post_init__(self):
        p = self.partition
        if len(self.base.stiffness) != p.dim:
            raise SubstrateError(f"base energy has length {len(self.base.stiffness)}, D={p.dim}")
        couplings = tuple(sorted(self.couplings, key=lambda c: (c.source, c.target)))
        pairs = [(c.source, c.target) for c in couplings]
        if len(set(pairs)) != len(pairs):
            raise SubstrateError(f"duplicate coupling pairs in {pairs}")
        for c in couplings:
            if c.target >= p.n_modules:
                raise SubstrateError(f"coupling ({c.source}, {c.target}) refers to a missing module")
            dm, dmp = p.module_sizes[c.source], p.module_sizes[c.target]
            if c.u.shape[0] != dm or c.v.shape[0] != dmp:
                raise SubstrateError(
                    f"coupling ({c.source}, {c.target}) factors {c.u.shape}/{c.v.shape} "
                    f"do not match module sizes {dm}/{dmp}"
                )
            if c.rank > min(dm, dmp):
                raise SubstrateError(f"rank {c.rank} exceeds min module size {min(dm, dmp)}")
        object.__setattr__(self, "couplings", couplings)
        if self.lambda_floor <= 0:
            raise SubstrateError("lambda_floor must be positive")
        ev = origin_spectrum(self)
        if ev[0] < self.lambda_floor:
            raise StiffnessError(ev[0], self.lambda_floor, ev)
        object.__setattr__(self, "_lambda_min", float(ev[0]))

    @property
    def dim(self):
        return self.partition.dim

    @property
    def lambda_min(self):
        """Smallest free-Hessian eigenvalue at the clamped origin."""
        return self._lambda_min

    @property
    def n_params(self):
        n = sum(c.u.size * self.train_u + c.v.size * self.train_v for c in self.couplings)
        return n + self.train_bias * self.partition.free_dim

    def param_blocks(self):
        """Named slices into ``theta`` in canonical order."""
        blocks, pos = [], 0
        for c in self.couplings:
            for name, arr, on in (("U", c.u, self.train_u), ("V", c.v, self.train_v)):
                if on:
                    blocks.append((f"{name}[{c.source},{c.target}]", slice(pos, pos + arr.size)))
                    pos += arr.size
        if self.train_bias:
            blocks.append(("bias", slice(pos, pos + self.partition.free_dim)))
        return blocks

    @cached_property
    def factor_stack(self):
        """All factors laid side by side: ``(A, B)`` of shape ``(D, sum k)``.

        Column block ``c`` of ``A`` holds ``U_c`` on the rows of module ``m``
        and of ``B`` holds ``V_c`` on the rows of ``m'``, so the coupling
        energy is ``sum((x A) * (x B))`` without forming any ``U V^T``.
        """
        p = self.partition
        r = sum(c.rank for c in self.couplings)
        a, b = np.zeros((p.dim, r)), np.zeros((p.dim, r))
        pos = 0
        for c in self.couplings:
            a[p.module_slice(c.source), pos:pos + c.rank] = c.u
            b[p.module_slice(c.target), pos:pos + c.rank] = c.v
            pos += c.rank
        a.setflags(write=False)
        b.setflags(write=False)
        return a, b

    def coupling_mask(self):
        """Boolean mask over ``theta`` selecting coupling-factor entries."""
        mask = np.zeros(self.n_params, bool)
        for name, sl in self.param_blocks():
            if name != "bias":
                mask[sl] = True
        return mask


def origin_spectrum(spec):
    """Sorted eigenvalues of the free Hessian with everything at zero."""
    return np.linalg.eigvalsh(hessian_free(spec, np.zeros(spec.dim), _checked=False))


def build_substrate(partition, base, couplings, lambda_floor=DEFAULT_LAMBDA_FLOOR,
                    rescale=True, **flags):
    """Construct a spec, shrinking all couplings by one scalar if too soft.

    Returns ``(spec, scale)``.  A scale below one is logged; with ``rescale``
    off the construction error propagates instead.
    """
    couplings = tuple(couplings)
    try:
        return SubstrateSpec(partition, base, couplings, lambda_floor=lambda_floor, **flags), 1.0
    except StiffnessError:
        if not rescale:
            raise
    # lambda_min(s) is concave in s with lambda_min(0) = min(a) > floor if feasible
    if base.stiffness[partition.free_slice].min() <= lambda_floor:
        raise SubstrateError("base stiffness alone is below lambda_floor; rescaling cannot help")

    def lam(s):
        scaled = tuple(_scale_coupling(c, s) for c in couplings)
        probe = SubstrateSpec.__new__(SubstrateSpec)
        object.__setattr__(probe, "partition", partition)
        object.__setattr__(probe, "base", base)
        object.__setattr__(probe, "couplings", scaled)
        return origin_spectrum(probe)[0]

    lo, hi = 0.0, 1.0
    target = lambda_floor * (1 + 1e-9)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if lam(mid) >= target:
            lo = mid
        else:
            hi = mid
    scale = lo
    logger.info("couplings rescaled by %.6g to keep lambda_min >= %g", scale, lambda_floor)
    scaled = tuple(_scale_coupling(c, scale) for c in couplings)
    return SubstrateSpec(partition, base, scaled, lambda_floor=lambda_floor, **flags), scale


def _scale_coupling(c, s):
    # W scales by s when both factors scale by sqrt(s)
    r = np.sqrt(s)
    return LowRankCoupling(c.source, c.target, c.u * r, c.v * r)


def random_coupling(partition, m, mp, rank, seed, gain=1.0):
    """Factors with i.i.d. N(0, 1/(k d)) entries, ``d`` the owning module size."""
    rng = np.random.default_rng(seed)
    dm, dmp = partition.module_sizes[m], partition.module_sizes[mp]
    u = rng.standard_normal((dm, rank)) / np.sqrt(rank * dm)
    v = rng.standard_normal((dmp, rank)) / np.sqrt(rank * dmp)
    g = np.sqrt(gain)
    return LowRankCoupling(m, mp, g * u, g * v)


# -- state helpers ------------------------------------------------------------

def _check_state(spec, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise SubstrateError(f"state has length {x.shape[-1]}, expected D={spec.dim}")
    return x


def _blocks(spec, x, c):
    p = spec.partition
    return x[..., p.module_slice(c.source)], x[..., p.module_slice(c.target)]


# -- energy and derivatives ---------------------------------------------------

def energy(spec, x):
    x = _check_state(spec, x)
    b = spec.base
    e = np.sum(0.5 * b.stiffness * x**2 + 0.25 * b.quartic * x**4 - b.bias * x, axis=-1)
    if spec.couplings:
        fa, fb = spec.factor_stack
        e = e + np.sum((x @ fa) * (x @ fb), axis=-1)
    return e


def grad_x(spec, x):
    x = _check_state(spec, x)
    shape = x.shape
    x = x.reshape(-1, spec.dim)
    b = spec.base
    g = b.stiffness * x - b.bias
    if b.has_quartic:
        g += b.quartic * x**3
    if spec.couplings:
        fa, fb = spec.factor_stack
        g += (x @ fb) @ fa.T + (x @ fa) @ fb.T
    return g.reshape(shape)


def _flat_cols(a):
    # column-major flattening of the trailing matrix dims
    return np.swapaxes(a, -1, -2).reshape(a.shape[:-2] + (-1,))


def grad_theta(spec, x):
    """Parameter gradient ``dE/dtheta`` in canonical order, shape ``(..., P)``."""
    x = _check_state(spec, x)
    parts = []
    for c in spec.couplings:
        xm, xmp = _blocks(spec, x, c)
        if spec.train_u:
            parts.append(_flat_cols(xm[..., :, None] * (xmp @ c.v)[..., None, :]))
        if spec.train_v:
            parts.append(_flat_cols(xmp[..., :, None] * (xm @ c.u)[..., None, :]))
    if spec.train_bias:
        parts.append(-x[..., spec.partition.free_slice])
    return np.concatenate(parts, axis=-1)


def grad_theta_jvp(spec, x, dx):
    """Directional derivative of ``grad_theta`` at ``x`` along ``dx``.

    Equals ``M_full @ dx`` where ``M_full`` is the mixed Hessian over all
    coordinates; with ``dx`` zero on clamped coordinates this is ``M @ dx_free``.
    """
    x = _check_state(spec, x)
    dx = _check_state(spec, dx)
    parts = []
    for c in spec.couplings:
        xm, xmp = _blocks(spec, x, c)
        dm, dmp = _blocks(spec, dx, c)
        if spec.train_u:
            parts.append(_flat_cols(dm[..., :, None] * (xmp @ c.v)[..., None, :]
                                    + xm[..., :, None] * (dmp @ c.v)[..., None, :]))
        if spec.train_v:
            parts.append(_flat_cols(dmp[..., :, None] * (xm @ c.u)[..., None, :]
                                    + xmp[..., :, None] * (dm @ c.u)[..., None, :]))
    if spec.train_bias:
        parts.append(-dx[..., spec.partition.free_slice])
    return np.concatenate(parts, axis=-1)


def hessian_full(spec, x):
    """Dense ``D x D`` Hessian of the energy at a single state."""
    x = _check_state(spec, x)
    if x.ndim != 1:
        raise SubstrateError("hessian_full takes a single state")
    b = spec.base
    p = spec.partition
    h = np.diag(b.stiffness + 3.0 * b.quartic * x**2)
    for c in spec.couplings:
        w = c.dense()
        sm, smp = p.module_slice(c.source), p.module_slice(c.target)
        h[sm, smp] += w
        h[smp, sm] += w.T
    return h


def hessian_free(spec, x, _checked=True):
    """Hessian restricted to the free (hidden, output) coordinates."""
    if _checked:
        x = _check_state(spec, x)
    fs = spec.partition.free_slice
    return hessian_full(spec, x)[fs, fs]


def mixed_second(spec, x):
    """Dense ``(P, free_dim)`` matrix of ``d^2 E / d theta d x_free``."""
    x = _check_state(spec, x)
    if x.ndim != 1:
        raise SubstrateError("mixed_second takes a single state")
    p = spec.partition
    eye = np.zeros((p.free_dim, p.dim))
    eye[:, p.free_slice] = np.eye(p.free_dim)
    return grad_theta_jvp(spec, np.broadcast_to(x, eye.shape), eye).T


def mixed_third_tensor(spec, x, step=1e-4):
    """Central-difference estimate of ``d^3 E / d theta d x_free d x_free``.

    Shape ``(P, free_dim, free_dim)``; built from differences of
    :func:`mixed_second`, independently of any analytic third derivative.
    """
    x = _check_state(spec, x)
    p = spec.partition
    n_free = p.free_dim
    out = np.empty((spec.n_params, n_free, n_free))
    for j in range(n_free):
        e = np.zeros(p.dim)
        e[p.input_dim + j] = step
        out[:, :, j] = (mixed_second(spec, x + e) - mixed_second(spec, x - e)) / (2 * step)
    return out


def mixed_third_coupling_norm(spec, x, step=1e-4):
    """Max-norm of the third mixed derivative over coupling-parameter rows."""
    n = mixed_third_tensor(spec, x, step)
    mask = spec.coupling_mask()
    return float(np.max(np.abs(n[mask]))) if mask.any() else 0.0


def third_x_diagonal(spec, x, step=1e-4):
    """Finite-difference diagonal ``d^3 E / d x_i^3`` over free coordinates."""
    x = _check_state(spec, x)
    p = spec.partition
    out = np.empty(p.free_dim)
    for j in range(p.free_dim):
        e = np.zeros(p.dim)
        e[p.input_dim + j] = step
        out[j] = (hessian_free(spec, x + e)[j, j] - hessian_free(spec, x - e)[j, j]) / (2 * step)
    return out


# -- parameters ---------------------------------------------------------------

def get_theta(spec):
    parts = []
    for c in spec.couplings:
        if spec.train_u:
            parts.append(c.u.ravel(order="F"))
        if spec.train_v:
            parts.append(c.v.ravel(order="F"))
    if spec.train_bias:
        parts.append(spec.base.bias[spec.partition.free_slice])
    return np.concatenate(parts) if parts else np.zeros(0)


def with_theta(spec, theta, check=True):
    """Return a new spec carrying ``theta``; the stiffness check is optional."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise SubstrateError(f"theta has shape {theta.shape}, expected ({spec.n_params},)")
    pos = 0
    couplings = []
    for c in spec.couplings:
        u, v = c.u, c.v
        if spec.train_u:
            u = theta[pos:pos + u.size].reshape(u.shape, order="F")
            pos += u.size
        if spec.train_v:
            v = theta[pos:pos + v.size].reshape(v.shape, order="F")
            pos += v.size
        couplings.append(LowRankCoupling(c.source, c.target, u, v))
    base = spec.base
    if spec.train_bias:
        bias = base.bias.copy()
        bias[spec.partition.free_slice] = theta[pos:]
        base = BaseEnergy(base.stiffness, bias, base.quartic)
    if check:
        return replace(spec, base=base, couplings=tuple(couplings))
    new = SubstrateSpec.__new__(SubstrateSpec)
    for f in ("partition", "train_u", "train_v", "train_bias", "lambda_floor", "_lambda_min"):
        object.__setattr__(new, f, getattr(spec, f))
    object.__setattr__(new, "base", base)
    object.__setattr__(new, "couplings", tuple(couplings))
    return new


# -- serialization ------------------------------------------------------------

_SPEC_KEYS = {"partition", "base", "couplings", "lambda_floor", "trainable", "auto_rescale"}
_BASE_KEYS = {"a", "b0", "kappa"}
_COUPLING_KEYS = {"m", "mp", "k", "seed", "gain", "u", "v"}
_TRAIN_KEYS = {"u", "v", "bias"}


def _strict(d, allowed, where):
    extra = set(d) - allowed
    if extra:
        raise SubstrateError(f"unknown keys in {where}: {sorted(extra)}")


def _per_coord(val, dim, name):
    arr = np.full(dim, float(val)) if np.isscalar(val) else np.asarray(val, float)
    if arr.shape != (dim,):
        raise SubstrateError(f"base.{name} must be a scalar or a list of length {dim}")
    return arr


def spec_from_dict(d):
    """Build a spec from its JSON form; returns ``(spec, scale)``.

    Couplings are given either by ``{"m", "mp", "k", "seed"}`` (optionally
    ``"gain"``) or by explicit ``{"m", "mp", "u", "v"}`` factor lists.
    """
    _strict(d, _SPEC_KEYS, "substrate")
    part_d = d["partition"]
    _strict(part_d, {"input_dim", "hidden_dim", "output_dim", "module_sizes"}, "partition")
    partition = BlockPartition(**part_d)
    base_d = d.get("base", {})
    _strict(base_d, _BASE_KEYS, "base")
    D = partition.dim
    base = BaseEnergy(
        _per_coord(base_d.get("a", 1.0), D, "a"),
        _per_coord(base_d.get("b0", 0.0), D, "b0"),
        _per_coord(base_d.get("kappa", 0.0), D, "kappa"),
    )
    couplings = []
    for cd in d.get("couplings", []):
        _strict(cd, _COUPLING_KEYS, "coupling")
        if "u" in cd or "v" in cd:
            couplings.append(LowRankCoupling(cd["m"], cd["mp"], cd["u"], cd["v"]))
        else:
            couplings.append(random_coupling(partition, cd["m"], cd["mp"], cd["k"],
                                             cd["seed"], cd.get("gain", 1.0)))
    train = d.get("trainable", {})
    _strict(train, _TRAIN_KEYS, "trainable")
    flags = {"train_u": train.get("u", True), "train_v": train.get("v", True),
             "train_bias": train.get("bias", True)}
    return build_substrate(partition, base, couplings, d.get("lambda_floor", DEFAULT_LAMBDA_FLOOR),
                           rescale=d.get("auto_rescale", False), **flags)


def spec_to_dict(spec):
    """Explicit-factor JSON form; round-trips through :func:`spec_from_dict`."""
    return {
        "partition": spec.partition.to_dict(),
        "base": {
            "a": spec.base.stiffness.tolist(),
            "b0": spec.base.bias.tolist(),
            "kappa": spec.base.quartic.tolist(),
        },
        "couplings": [
            {"m": c.source, "mp": c.target, "u": c.u.tolist(), "v": c.v.tolist()}
            for c in spec.couplings
        ],
        "lambda_floor": spec.lambda_floor,
        "trainable": {"u": spec.train_u, "v": spec.train_v, "bias": spec.train_bias},
    }
