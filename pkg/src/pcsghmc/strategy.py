"""Meta-strategy networks producing the diagonal coupling and damping.

Two small networks share one architecture: a 3x10 leaky-rectifier MLP in
parallel with a linear shortcut and a 10-unit Gaussian-RBF shortcut,
summed into a scalar ``o`` that is squashed through ``M * sigmoid(5 o)``
above a positive floor.  The Q network (2 inputs) scales the coupling by
the per-direction sigma; the D network (3 inputs) sets the damping.

Everything is evaluated batched over flattened (chain, coordinate)
points.  All derivatives are hand-written: the MLP is piecewise linear,
so its second derivatives vanish almost everywhere; the RBF shortcut,
the input squashing maps, and the output sigmoids carry the curvature in
closed form.  Finite-difference oracles in the tests pin every exposed
derivative, including the mixed parameter/input second-order terms used
by trajectory backpropagation.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ArchiveError, ConfigError
from .rng import stream

_HIDDEN = 10
_N_RBF = 10
_LEAK = 0.01
_MAGIC = b"MSP1"
_VERSION = 1


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def transform_inputs(u_hat, p_i, g_i_star):
    """Squash raw dynamics quantities into the network input ranges."""
    u_hat = np.asarray(u_hat, dtype=float)
    r = np.maximum(u_hat + 1.0, 0.0)
    i_u = np.log(r**2 + np.e - 1.0) - 1.0
    i_p = 3.0 * _sigmoid(np.asarray(p_i, dtype=float) / 10.0) - 1.5
    i_g = 3.0 * _sigmoid(np.asarray(g_i_star, dtype=float) / 30.0) - 1.5
    return i_u, i_p, i_g


def _transform_u_derivs(u_hat):
    u_hat = np.asarray(u_hat, dtype=float)
    r = np.maximum(u_hat + 1.0, 0.0)
    den = r**2 + np.e - 1.0
    active = (u_hat > -1.0).astype(float)
    d1 = 2.0 * r / den * active
    d2 = 2.0 * (np.e - 1.0 - r**2) / den**2 * active
    return d1, d2


def _transform_sig_derivs(x, scale, gain=3.0):
    # gain * sigmoid(x / scale): first and second derivatives
    s = _sigmoid(np.asarray(x, dtype=float) / scale)
    d1 = gain / scale * s * (1.0 - s)
    d2 = gain / scale**2 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return d1, d2


@dataclass
class NetParams:
    """One parallel network: MLP + linear shortcut + RBF shortcut."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray  # shape () array so grads share the pytree layout
    lin_w: np.ndarray
    rbf_c: np.ndarray
    rbf_s: np.ndarray
    rbf_a: np.ndarray

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def constant(cls, n_in: int) -> "NetParams":
        return cls(
            W1=np.zeros((_HIDDEN, n_in)),
            b1=np.zeros(_HIDDEN),
            W2=np.zeros((_HIDDEN, _HIDDEN)),
            b2=np.zeros(_HIDDEN),
            W3=np.zeros((_HIDDEN, _HIDDEN)),
            b3=np.zeros(_HIDDEN),
            w4=np.zeros(_HIDDEN),
            b4=np.zeros(()),
            lin_w=np.zeros(n_in),
            rbf_c=np.zeros((_N_RBF, n_in)),
            rbf_s=np.full(_N_RBF, 0.5),
            rbf_a=np.zeros(_N_RBF),
        )

    @classmethod
    def random(cls, n_in: int, rng: np.random.Generator) -> "NetParams":
        def uni(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        out = cls.constant(n_in)
        out.W1 = uni(n_in, (_HIDDEN, n_in))
        out.W2 = uni(_HIDDEN, (_HIDDEN, _HIDDEN))
        out.W3 = uni(_HIDDEN, (_HIDDEN, _HIDDEN))
        out.w4 = uni(_HIDDEN, _HIDDEN)
        out.rbf_c = rng.uniform(-1.5, 1.5, size=(_N_RBF, n_in))
        return out

    def arrays(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def zeros_like(self) -> "NetParams":
        return NetParams(**{n: np.zeros_like(a) for n, a in self.arrays()})

    def copy(self) -> "NetParams":
        return NetParams(**{n: a.copy() for n, a in self.arrays()})

    def validate(self) -> None:
        if np.any(self.rbf_s <= 0):
            raise ConfigError("RBF widths must be positive")


def _net_forward(net: NetParams, x: np.ndarray):
    """Batched forward pass returning (o, do/dx, cache)."""
    z1 = x @ net.W1.T + net.b1
    d1 = np.where(z1 > 0, 1.0, _LEAK)
    h1 = z1 * d1
    z2 = h1 @ net.W2.T + net.b2
    d2 = np.where(z2 > 0, 1.0, _LEAK)
    h2 = z2 * d2
    z3 = h2 @ net.W3.T + net.b3
    d3 = np.where(z3 > 0, 1.0, _LEAK)
    h3 = z3 * d3
    o = h3 @ net.w4 + float(net.b4)

    u3 = d3 * net.w4
    u2 = d2 * (u3 @ net.W3)
    u1 = d1 * (u2 @ net.W2)
    g = u1 @ net.W1

    o = o + x @ net.lin_w
    g = g + net.lin_w

    diff = x[:, None, :] - net.rbf_c[None, :, :]
    q = np.sum(diff**2, axis=2)
    phi = np.exp(-q / (2.0 * net.rbf_s**2))
    o = o + phi @ net.rbf_a
    coef = net.rbf_a / net.rbf_s**2
    g = g - np.einsum("nj,njk->nk", coef * phi, diff)

    cache = dict(
        x=x, d1=d1, d2=d2, d3=d3, h1=h1, h2=h2, h3=h3,
        u1=u1, u2=u2, u3=u3, diff=diff, q=q, phi=phi,
    )
    return o, g, cache


def _net_hessian(net: NetParams, cache) -> np.ndarray:
    """d^2 o / dx^2 per sample; only the RBF shortcut carries curvature
    (the MLP and linear parts are piecewise linear)."""
    diff, phi = cache["diff"], cache["phi"]
    n, j, k = diff.shape
    coef = net.rbf_a / net.rbf_s**2
    outer = np.einsum("nj,njk,njl->nkl", coef * phi / net.rbf_s**2, diff, diff)
    trace = np.einsum("nj,kl->nkl", coef * phi, np.eye(k))
    return outer - trace


def _net_backward(net: NetParams, cache, up_o, up_g=None) -> NetParams:
    """Parameter gradients of sum_n [up_o_n * o_n + up_g_n . (do/dx)_n].

    The up_g path is exact almost everywhere: activation patterns are
    treated as locally constant, which holds off the (measure-zero)
    rectifier kinks.
    """
    x = cache["x"]
    grads = net.zeros_like()
    up_o = np.asarray(up_o, dtype=float)

    d3u = up_o[:, None] * net.w4 * cache["d3"]
    grads.w4 += up_o @ cache["h3"]
    grads.b4 += np.asarray(up_o.sum())
    grads.W3 += d3u.T @ cache["h2"]
    grads.b3 += d3u.sum(axis=0)
    d2u = (d3u @ net.W3) * cache["d2"]
    grads.W2 += d2u.T @ cache["h1"]
    grads.b2 += d2u.sum(axis=0)
    d1u = (d2u @ net.W2) * cache["d1"]
    grads.W1 += d1u.T @ x
    grads.b1 += d1u.sum(axis=0)
    grads.lin_w += up_o @ x

    phi, diff, q = cache["phi"], cache["diff"], cache["q"]
    grads.rbf_a += up_o @ phi
    w_phi = up_o[:, None] * phi
    grads.rbf_c += (net.rbf_a / net.rbf_s**2)[:, None] * np.einsum(
        "nj,njk->jk", w_phi, diff
    )
    grads.rbf_s += (net.rbf_a / net.rbf_s**3) * np.einsum("nj,nj->j", w_phi, q)

    if up_g is not None:
        v = np.asarray(up_g, dtype=float)
        a1 = cache["d1"] * (v @ net.W1.T)
        a2 = cache["d2"] * (a1 @ net.W2.T)
        a3 = cache["d3"] * (a2 @ net.W3.T)
        grads.W1 += cache["u1"].T @ v
        grads.W2 += cache["u2"].T @ a1
        grads.W3 += cache["u3"].T @ a2
        grads.w4 += a3.sum(axis=0)
        grads.lin_w += v.sum(axis=0)

        # w_nj = (c_j - x_n) . v_n / s_j^2
        w = -np.einsum("njk,nk->nj", diff, v) / net.rbf_s**2
        grads.rbf_a += np.einsum("nj,nj->j", phi, w)
        aphi = net.rbf_a[None, :] * phi
        grads.rbf_c += (
            np.einsum("nj,nk->jk", aphi, v)
            + np.einsum("nj,njk->jk", aphi * w, diff)
        ) / net.rbf_s[:, None] ** 2
        grads.rbf_s += np.einsum(
            "nj,nj->j", aphi * w, q / net.rbf_s**2 - 2.0
        ) / net.rbf_s

    return grads


@dataclass
class StrategyParams:
    """Both networks plus output-transform constants."""

    q_net: NetParams
    d_net: NetParams
    c1: float = 0.1
    c2: float = 0.1
    m_q: float = 100.0
    m_d: float = 30.0
    eta: float = float(np.sqrt(0.001))
    run_id: str = ""

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("floors c1, c2 must be positive")
        self.q_net.validate()
        self.d_net.validate()

    @classmethod
    def constant(cls, **kw) -> "StrategyParams":
        return cls(q_net=NetParams.constant(2), d_net=NetParams.constant(3), **kw)

    @classmethod
    def random(cls, seed: int, **kw) -> "StrategyParams":
        return cls(
            q_net=NetParams.random(2, stream(seed, "weights", 0)),
            d_net=NetParams.random(3, stream(seed, "weights", 1)),
            **kw,
        )

    def copy(self) -> "StrategyParams":
        return StrategyParams(
            q_net=self.q_net.copy(), d_net=self.d_net.copy(),
            c1=self.c1, c2=self.c2, m_q=self.m_q, m_d=self.m_d,
            eta=self.eta, run_id=self.run_id,
        )

    def zero_grads(self) -> "StrategyGrads":
        return StrategyGrads(self.q_net.zeros_like(), self.d_net.zeros_like())


@dataclass
class StrategyGrads:
    q_net: NetParams
    d_net: NetParams

    def add_(self, other: "StrategyGrads", scale: float = 1.0) -> None:
        for mine, theirs in ((self.q_net, other.q_net), (self.d_net, other.d_net)):
            for name, arr in mine.arrays():
                arr += scale * getattr(theirs, name)


def evaluate(params: StrategyParams, u_hat, p_i, g_i_star, sigma_i):
    """Batched evaluation with the input derivatives the dynamics needs.

    All arguments broadcast to a common flat shape.  Returns a dict with
    G, C, dG_du, dG_dp, dC_dp and the caches consumed by ``backward``.
    """
    u_hat, p_i, g_i_star, sigma_i = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (u_hat, p_i, g_i_star, sigma_i))
    )
    shape = u_hat.shape
    u = u_hat.ravel()
    p = p_i.ravel()
    gs = g_i_star.ravel()
    sig = sigma_i.ravel()

    i_u, i_p, i_g = transform_inputs(u, p, gs)
    x_q = np.stack([i_u, i_p], axis=1)
    x_d = np.stack([i_u, i_p, i_g], axis=1)
    o_q, g_q, cache_q = _net_forward(params.q_net, x_q)
    o_d, g_d, cache_d = _net_forward(params.d_net, x_d)

    s_q = _sigmoid(5.0 * o_q)
    s_d = _sigmoid(5.0 * o_d)
    big_g = sig * (params.c1 + params.m_q * s_q)
    big_c = params.c2 + params.m_d * s_d
    e_q = sig * params.m_q * 5.0 * s_q * (1.0 - s_q)  # dG/do_q
    f_d = params.m_d * 5.0 * s_d * (1.0 - s_d)  # dC/do_d

    tu1, tu2 = _transform_u_derivs(u)
    tp1, tp2 = _transform_sig_derivs(p, 10.0)
    tg1, tg2 = _transform_sig_derivs(gs, 30.0)

    out = dict(
        G=(big_g).reshape(shape),
        C=(big_c).reshape(shape),
        dG_du=(e_q * g_q[:, 0] * tu1).reshape(shape),
        dG_dp=(e_q * g_q[:, 1] * tp1).reshape(shape),
        dC_dp=(f_d * g_d[:, 1] * tp1).reshape(shape),
    )
    out["_cache"] = dict(
        shape=shape, u=u, p=p, gs=gs, sig=sig,
        o_q=o_q, g_q=g_q, cache_q=cache_q, s_q=s_q, e_q=e_q,
        o_d=o_d, g_d=g_d, cache_d=cache_d, s_d=s_d, f_d=f_d,
        tu=(tu1, tu2), tp=(tp1, tp2), tg=(tg1, tg2),
    )
    return out


def eval_Q(params: StrategyParams, u_hat, p_i, sigma_i):
    """Coupling diagonal G_ii = sigma_i (c1 + M_Q sigmoid(5 o_Q))."""
    return evaluate(params, u_hat, p_i, 0.0, sigma_i)["G"]


def eval_D(params: StrategyParams, u_hat, p_i, g_i_star):
    """Damping diagonal C_ii = c2 + M_D sigmoid(5 o_D)."""
    return evaluate(params, u_hat, p_i, g_i_star, 1.0)["C"]


def eval_with_input_derivs(params: StrategyParams, u_hat, p_i, g_i_star, sigma_i):
    out = evaluate(params, u_hat, p_i, g_i_star, sigma_i)
    return out["G"], out["C"], out["dG_du"], out["dG_dp"], out["dC_dp"]


def backward(
    params: StrategyParams,
    result: dict,
    up_G=None,
    up_C=None,
    up_dG_du=None,
    up_dG_dp=None,
    up_dC_dp=None,
):
    """Exact reverse-mode step through one evaluation.

    Takes upstream gradients on any of the five outputs and returns
    ``(StrategyGrads, input_grads)`` where input_grads is a dict with
    d/d(u_hat), d/d(p_i), d/d(g_i_star) of the weighted output sum.
    sigma_i is an estimator output held constant under backprop, so no
    sigma gradient is produced.
    """
    c = result["_cache"]
    n = c["u"].size
    shape = c["shape"]

    def flat(a):
        if a is None:
            return np.zeros(n)
        return np.broadcast_to(np.asarray(a, dtype=float), shape).ravel()

    ug, uc = flat(up_G), flat(up_C)
    udu, udp, ucp = flat(up_dG_du), flat(up_dG_dp), flat(up_dC_dp)

    sig = c["sig"]
    g_q, g_d = c["g_q"], c["g_d"]
    e_q, f_d = c["e_q"], c["f_d"]
    s_q, s_d = c["s_q"], c["s_d"]
    tu1, tu2 = c["tu"]
    tp1, tp2 = c["tp"]
    tg1, tg2 = c["tg"]
    # d(e_q)/d(o_q) and d(f_d)/d(o_d): 25 M s'(1-2s), with sigma folded in
    de_q = sig * params.m_q * 25.0 * s_q * (1.0 - s_q) * (1.0 - 2.0 * s_q)
    df_d = params.m_d * 25.0 * s_d * (1.0 - s_d) * (1.0 - 2.0 * s_d)

    # adjoints on the two raw network outputs and on do/dx
    up_oq = ug * e_q + (udu * g_q[:, 0] * tu1 + udp * g_q[:, 1] * tp1) * de_q
    up_gq = np.stack([udu * e_q * tu1, udp * e_q * tp1], axis=1)
    up_od = uc * f_d + ucp * g_d[:, 1] * tp1 * df_d
    up_gd = np.stack(
        [np.zeros(n), ucp * f_d * tp1, np.zeros(n)], axis=1
    )

    grads = StrategyGrads(
        q_net=_net_backward(params.q_net, c["cache_q"], up_oq, up_gq),
        d_net=_net_backward(params.d_net, c["cache_d"], up_od, up_gd),
    )

    # input gradients: chain through both nets; MLP input curvature is
    # zero a.e., the RBF Hessian carries the rest
    h_q = _net_hessian(params.q_net, c["cache_q"])
    h_d = _net_hessian(params.d_net, c["cache_d"])

    du = (
        ug * e_q * g_q[:, 0] * tu1
        + uc * f_d * g_d[:, 0] * tu1
        + udu * (de_q * g_q[:, 0] ** 2 * tu1**2
                 + e_q * h_q[:, 0, 0] * tu1**2
                 + e_q * g_q[:, 0] * tu2)
        + udp * (de_q * g_q[:, 0] * g_q[:, 1] * tu1 * tp1
                 + e_q * h_q[:, 1, 0] * tu1 * tp1)
        + ucp * (df_d * g_d[:, 0] * g_d[:, 1] * tu1 * tp1
                 + f_d * h_d[:, 1, 0] * tu1 * tp1)
    )
    dp = (
        ug * e_q * g_q[:, 1] * tp1
        + uc * f_d * g_d[:, 1] * tp1
        + udu * (de_q * g_q[:, 0] * g_q[:, 1] * tu1 * tp1
                 + e_q * h_q[:, 0, 1] * tu1 * tp1)
        + udp * (de_q * g_q[:, 1] ** 2 * tp1**2
                 + e_q * h_q[:, 1, 1] * tp1**2
                 + e_q * g_q[:, 1] * tp2)
        + ucp * (df_d * g_d[:, 1] ** 2 * tp1**2
                 + f_d * h_d[:, 1, 1] * tp1**2
                 + f_d * g_d[:, 1] * tp2)
    )
    dgs = (
        uc * f_d * g_d[:, 2] * tg1
        + ucp * (df_d * g_d[:, 1] * g_d[:, 2] * tp1 * tg1
                 + f_d * h_d[:, 1, 2] * tp1 * tg1)
    )
    input_grads = dict(
        u_hat=du.reshape(shape), p_i=dp.reshape(shape), g_i_star=dgs.reshape(shape)
    )
    return grads, input_grads


# ------------------------------------------------------------- checkpoint

_ARRAY_ORDER = [
    "W1", "b1", "W2", "b2", "W3", "b3", "w4", "b4", "lin_w",
    "rbf_c", "rbf_s", "rbf_a",
]


def save(params: StrategyParams, path) -> None:
    header = struct.pack(
        "<II5d", 2, 3, params.c1, params.c2, params.m_q, params.m_d, params.eta
    )
    rid = params.run_id.encode()[:16].ljust(16, b"\0")
    payload = bytearray(struct.pack("<I", _VERSION) + header + rid)
    for net in (params.q_net, params.d_net):
        for name in _ARRAY_ORDER:
            arr = np.ascontiguousarray(getattr(net, name), dtype="<f8")
            payload += struct.pack("<I", arr.size)
            payload += arr.tobytes()
    crc = zlib.crc32(bytes(payload))
    with open(path, "wb") as fh:
        fh.write(_MAGIC + bytes(payload) + struct.pack("<I", crc))


def load(path, expect_eta: float | None = None) -> StrategyParams:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ArchiveError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise ArchiveError(f"{path}: not a strategy checkpoint")
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ArchiveError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != _VERSION:
        raise ArchiveError(f"{path}: unsupported checkpoint version {version}")
    n_q, n_d, c1, c2, m_q, m_d, eta = take("<II5d")
    (rid,) = take("<16s")

    def read_net(n_in):
        nonlocal off
        net = NetParams.constant(n_in)
        for name in _ARRAY_ORDER:
            template = getattr(net, name)
            (count,) = take("<I")
            if count != template.size:
                raise ArchiveError(f"{path}: malformed array block {name}")
            flat = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
            off += 8 * count
            setattr(net, name, flat.reshape(template.shape).copy())
        return net

    q_net = read_net(n_q)
    d_net = read_net(n_d)
    if off != len(payload):
        raise ArchiveError(f"{path}: trailing bytes in checkpoint")
    out = StrategyParams(
        q_net=q_net, d_net=d_net, c1=c1, c2=c2, m_q=m_q, m_d=m_d, eta=eta,
        run_id=rid.rstrip(b"\0").decode(errors="replace"),
    )
    if expect_eta is not None and abs(expect_eta - eta) > 1e-12:
        warnings.warn(
            f"checkpoint was trained at step size {eta:g}; "
            f"running at {expect_eta:g} (output scales are step-size coupled)",
            stacklevel=2,
        )
    return out
