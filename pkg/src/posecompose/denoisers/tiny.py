"""A small trainable conditional denoiser with manual forward/backward.

Three resolution levels (full, 1/2, 1/4), each a 3x3 conv mixing block with a
per-channel time bias, followed by a cross-attention block over text tokens.
The decoder additionally injects the pooled control map into the latent
before its attention. Attention runs token-to-pixel: each token softmax-
attends over all spatial positions and deposits its value vector where the
keys match. The softmax normalizes over positions, so a token carries a
fixed conditioning budget; regions claiming the same token compete for it,
and a token asked to cover several figures spreads thinner over each.

The noise estimate is assembled by a scheduled residual head,
eps_hat = (phi(t) @ gx) * x_t + (phi(t) @ gy) * y, where y is the decoder
output and phi(t) packs sqrt(abar), sqrt(1-abar) and their (clipped) ratios,
so the exact inverse of the forward noising is representable.

Everything is float64 numpy; gradients are validated against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..diffusion import NoiseSchedule, add_noise
from ..errors import DomainError
from ..pose_geometry import make_figure_pose
from .contract import DenoiserContract, embed_tokens, pose_control
from .render import IDENTITY_PALETTE, SETTING_PALETTE, render_scene

RATIO_CLIP = 20.0


@dataclass(frozen=True)
class TinyConfig:
    channels: tuple = (8, 16, 32)
    token_dim: int = 16
    attn_dim: int = 16

    @property
    def site_names(self):
        return ["enc.0", "enc.1", "enc.2", "dec.2", "dec.1", "dec.0"]


def time_features(t, sched: NoiseSchedule) -> np.ndarray:
    """(B, 4) features [a, b, clip(1/b)/20, clip(a/b)/20] with a=sqrt(abar)."""
    t = np.atleast_1d(np.asarray(t, dtype=int))
    abar = sched.alpha_bar[t]
    a = np.sqrt(abar)
    b = np.sqrt(1.0 - abar)
    f3 = np.minimum(1.0 / np.maximum(b, 1e-12), RATIO_CLIP) / RATIO_CLIP
    f4 = np.minimum(a / np.maximum(b, 1e-12), RATIO_CLIP) / RATIO_CLIP
    return np.stack([a, b, f3, f4], axis=1)


def init_params(seed: int, cfg: TinyConfig = TinyConfig(), zero: bool = False,
                dtype=np.float64) -> dict:
    """Seeded parameter dict; ``zero`` gives the all-zero sanity configuration."""
    rng = np.random.default_rng(seed)
    c0, c1, c2 = cfg.channels
    d, td = cfg.attn_dim, cfg.token_dim

    def mat(*shape, std):
        if zero:
            return np.zeros(shape, dtype=dtype)
        return rng.normal(0.0, std, size=shape).astype(dtype)

    p = {}
    enc_io = [(3, c0), (c0, c1), (c1, c2)]
    dec_io = [(c2, c2), (c2, c1), (c1, c0)]
    for stage, ios in (("enc", enc_io), ("dec", dec_io)):
        for lvl, (cin, cout) in enumerate(ios):
            lv = lvl if stage == "enc" else 2 - lvl
            k = f"{stage}{lv}"
            p[f"{k}.conv.W"] = mat(3, 3, cin, cout, std=1.0 / np.sqrt(9 * cin))
            p[f"{k}.conv.b"] = np.zeros(cout, dtype=dtype)
            p[f"{k}.time"] = mat(4, cout, std=0.01)
            p[f"{k}.attn.Q"] = mat(td, d, std=1.0 / np.sqrt(td))
            p[f"{k}.attn.K"] = mat(cout, d, std=1.0 / np.sqrt(cout))
            p[f"{k}.attn.V"] = mat(td, cout, std=1.0 / np.sqrt(td))
            if stage == "dec":
                p[f"{k}.ctrl"] = mat(cout, std=0.5)
    p["out.W"] = mat(c0, 3, std=1.0 / np.sqrt(c0))
    p["out.b"] = np.zeros(3, dtype=dtype)
    p["gate.x"] = np.zeros(4, dtype=dtype)
    p["gate.y"] = np.zeros(4, dtype=dtype)
    return p


# ---------------------------------------------------------------------------
# primitive layers


def _conv3x3_fwd(x, W, b):
    B, H, Wd, Cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.tile(b, (B, H, Wd, 1))
    for ky in range(3):
        for kx in range(3):
            out += xp[:, ky:ky + H, kx:kx + Wd, :] @ W[ky, kx]
    return out, x


def _conv3x3_bwd(dout, x, W):
    B, H, Wd, Cin = x.shape
    Cout = dout.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dW = np.empty_like(W)
    dflat = dout.reshape(-1, Cout)
    for ky in range(3):
        for kx in range(3):
            view = xp[:, ky:ky + H, kx:kx + Wd, :]
            dW[ky, kx] = view.reshape(-1, Cin).T @ dflat
            dxp[:, ky:ky + H, kx:kx + Wd, :] += dout @ W[ky, kx].T
    db = dflat.sum(axis=0)
    return dxp[:, 1:-1, 1:-1, :], dW, db


def _pool2_fwd(x):
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _pool2_bwd(dout, in_shape):
    B, H, W, C = in_shape
    d = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) / 4.0
    return d


def _up2_fwd(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up2_bwd(dout):
    B, H, W, C = dout.shape
    return dout.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


ATTN_SCALE_DIVISOR = 16  # deposit gain P/16 keeps per-pixel amplitudes O(1)


def _attn_fwd(h, tokens, prm, key):
    """Token-to-pixel attention: softmax over positions, scaled deposit."""
    B, H, W, C = h.shape
    P = H * W
    hf = h.reshape(B, P, C)
    d = prm[f"{key}.attn.Q"].shape[1]
    scale = 1.0 / np.sqrt(d)
    gain = P / ATTN_SCALE_DIVISOR

    q = tokens @ prm[f"{key}.attn.Q"]                    # (B,K,D)
    k = hf @ prm[f"{key}.attn.K"]                        # (B,P,D)
    v = tokens @ prm[f"{key}.attn.V"]                    # (B,K,C)
    logits = q @ k.transpose(0, 2, 1) * scale            # (B,K,P)
    A = _softmax(logits, axis=2)
    deposit = A.transpose(0, 2, 1) @ v * gain            # (B,P,C)

    out = (hf + deposit).reshape(B, H, W, C)
    cache = dict(hf=hf, tokens=tokens, A=A, q=q, k=k, v=v,
                 scale=scale, gain=gain, shape=(B, H, W, C))
    return out, cache


def _attn_bwd(dout, cache, prm, grads, key):
    B, H, W, C = cache["shape"]
    P = H * W
    dflat = dout.reshape(B, P, C)
    hf, tokens = cache["hf"], cache["tokens"]
    A = cache["A"]
    scale, gain = cache["scale"], cache["gain"]

    dh = dflat.copy()
    ddep = dflat * gain
    dA = np.einsum("bpc,bkc->bkp", ddep, cache["v"])
    dv = A @ ddep                                                  # (B,K,C)
    dlog = A * (dA - (dA * A).sum(axis=2, keepdims=True))
    dq = dlog @ cache["k"] * scale                                 # (B,K,D)
    dk = dlog.transpose(0, 2, 1) @ cache["q"] * scale              # (B,P,D)
    dh += dk @ prm[f"{key}.attn.K"].T
    grads[f"{key}.attn.Q"] += np.einsum("bkt,bkd->td", tokens, dq)
    grads[f"{key}.attn.K"] += np.einsum("bpc,bpd->cd", hf, dk)
    grads[f"{key}.attn.V"] += np.einsum("bkt,bkc->tc", tokens, dv)

    return dh.reshape(B, H, W, C)


# ---------------------------------------------------------------------------
# full network


def _block_fwd(h, prm, key, tfeat, tokens, hooks, cf_level=None):
    out_c, x_in = _conv3x3_fwd(h, prm[f"{key}.conv.W"], prm[f"{key}.conv.b"])
    biased = out_c + (tfeat @ prm[f"{key}.time"])[:, None, None, :]
    act = np.tanh(biased)
    pre_attn = act
    if cf_level is not None:
        pre_attn = act + cf_level * prm[f"{key}.ctrl"]
    attn_out, attn_cache = _attn_fwd(pre_attn, tokens, prm, key)
    site = f"{key[:3]}.{key[3]}"
    hook = hooks.get(site)
    hooked = hook(attn_out) if hook is not None else attn_out
    cache = dict(x_in=x_in, act=act, attn=attn_cache, cf=cf_level)
    return hooked, cache


def _block_bwd(dout, cache, prm, grads, key, tfeat):
    dattn = _attn_bwd(dout, cache["attn"], prm, grads, key)
    if cache["cf"] is not None:
        grads[f"{key}.ctrl"] += (dattn * cache["cf"]).sum(axis=(0, 1, 2))
    dact = dattn
    dbiased = dact * (1.0 - cache["act"] ** 2)
    grads[f"{key}.time"] += np.einsum("bf,bc->fc", tfeat, dbiased.sum(axis=(1, 2)))
    dx, dW, db = _conv3x3_bwd(dbiased, cache["x_in"], prm[f"{key}.conv.W"])
    grads[f"{key}.conv.W"] += dW
    grads[f"{key}.conv.b"] += db
    return dx


def tiny_forward(prm, x, tfeat, tokens, cf, hooks=None, control_levels=None,
                 want_cache=False):
    """Full forward pass. ``hooks`` maps site name to a latent transform;
    ``control_levels`` optionally overrides the pooled control map per
    downsample factor {1, 2, 4} (shared across the batch)."""
    hooks = hooks or {}
    dtype = prm["out.W"].dtype
    x = np.asarray(x, dtype=dtype)
    tfeat = np.asarray(tfeat, dtype=dtype)
    tokens = np.asarray(tokens, dtype=dtype)
    B = x.shape[0]
    if control_levels is None:
        cf1 = np.asarray(cf, dtype=dtype)
        cf2 = _pool2_fwd(cf1)
        cf4 = _pool2_fwd(cf2)
        levels = {1: cf1, 2: cf2, 4: cf4}
    else:
        levels = {}
        for f in (1, 2, 4):
            arr = np.asarray(control_levels[f], dtype=dtype)
            levels[f] = np.broadcast_to(arr[None], (B,) + arr.shape)

    caches = {}
    h, caches["enc0"] = _block_fwd(x, prm, "enc0", tfeat, tokens, hooks)
    h1 = _pool2_fwd(h)
    h1o, caches["enc1"] = _block_fwd(h1, prm, "enc1", tfeat, tokens, hooks)
    h2 = _pool2_fwd(h1o)
    h2o, caches["enc2"] = _block_fwd(h2, prm, "enc2", tfeat, tokens, hooks)

    g2, caches["dec2"] = _block_fwd(h2o, prm, "dec2", tfeat, tokens, hooks, cf_level=levels[4])
    g1 = _up2_fwd(g2)
    g1o, caches["dec1"] = _block_fwd(g1, prm, "dec1", tfeat, tokens, hooks, cf_level=levels[2])
    g0 = _up2_fwd(g1o)
    g0o, caches["dec0"] = _block_fwd(g0, prm, "dec0", tfeat, tokens, hooks, cf_level=levels[1])

    y = g0o @ prm["out.W"] + prm["out.b"]
    sx = tfeat @ prm["gate.x"]
    sy = tfeat @ prm["gate.y"]
    eps = sx[:, None, None, None] * x + sy[:, None, None, None] * y

    if not want_cache:
        return eps
    caches.update(dict(x=x, y=y, g0o=g0o, sx=sx, sy=sy, tfeat=tfeat,
                       enc0_out=h, enc1_out=h1o))
    return eps, caches


def tiny_backward(prm, caches, deps):
    """Gradients of a scalar loss given d(loss)/d(eps). Assumes the forward
    pass ran with identity hooks."""
    grads = {k: np.zeros_like(v) for k, v in prm.items()}
    x, y = caches["x"], caches["y"]
    tfeat = caches["tfeat"]
    sx, sy = caches["sx"], caches["sy"]

    grads["gate.x"] += np.einsum("bf,b->f", tfeat, (deps * x).sum(axis=(1, 2, 3)))
    grads["gate.y"] += np.einsum("bf,b->f", tfeat, (deps * y).sum(axis=(1, 2, 3)))
    dy = sy[:, None, None, None] * deps

    grads["out.W"] += np.einsum("bhwc,bhwo->co", caches["g0o"], dy)
    grads["out.b"] += dy.sum(axis=(0, 1, 2))
    dg0o = dy @ prm["out.W"].T

    dg0 = _block_bwd(dg0o, caches["dec0"], prm, grads, "dec0", tfeat)
    dg1o = _up2_bwd(dg0)
    dg1 = _block_bwd(dg1o, caches["dec1"], prm, grads, "dec1", tfeat)
    dg2 = _up2_bwd(dg1)
    dh2o = _block_bwd(dg2, caches["dec2"], prm, grads, "dec2", tfeat)

    dh2o += 0.0  # decoder consumed the bottleneck directly
    dh2 = _block_bwd(dh2o, caches["enc2"], prm, grads, "enc2", tfeat)
    dh1o = _pool2_bwd(dh2, caches["enc1_out"].shape)
    dh1 = _block_bwd(dh1o, caches["enc1"], prm, grads, "enc1", tfeat)
    dh0 = _pool2_bwd(dh1, caches["enc0_out"].shape)
    _block_bwd(dh0, caches["enc0"], prm, grads, "enc0", tfeat)
    return grads


def tiny_epsilon(prm, x_t, t, tokens, c_f, site_hooks=None, control_levels=None,
                 sched: NoiseSchedule | None = None):
    """Contract-level entry point: batched noise prediction with hooks."""
    if sched is None:
        raise DomainError("INVALID_RANGE", "a noise schedule is required")
    cfg = TinyConfig()
    if site_hooks is not None:
        if sorted(site_hooks.keys()) != sorted(cfg.site_names):
            raise DomainError(
                "HOOK_ARITY",
                f"expected hooks for {cfg.site_names}, got {sorted(site_hooks.keys())}",
            )
    tfeat = np.broadcast_to(time_features(int(t), sched), (x_t.shape[0], 4))
    return tiny_forward(prm, x_t, tfeat, tokens, c_f,
                        hooks=site_hooks, control_levels=control_levels)


class TinyDenoiser(DenoiserContract):
    sites = [("enc.0", 1), ("enc.1", 2), ("enc.2", 4),
             ("dec.2", 4), ("dec.1", 2), ("dec.0", 1)]

    def __init__(self, params: dict, sched: NoiseSchedule, cfg: TinyConfig = TinyConfig()):
        self.params = params
        self.sched = sched
        self.cfg = cfg

    def epsilon(self, x, t, tokens, pose_maps, hooks=None, control_levels=None):
        hooks = self.check_hooks(hooks)
        hooks = {k: v for k, v in hooks.items() if v is not None}
        tfeat = np.broadcast_to(time_features(int(t), self.sched), (x.shape[0], 4))
        return tiny_forward(self.params, x, tfeat, tokens, pose_maps,
                            hooks=hooks, control_levels=control_levels)


# ---------------------------------------------------------------------------
# training


def loss_and_grads(prm, x_t, tfeat, tokens, cf, eps_true):
    """Mean over batch of the summed squared error, with full gradients."""
    eps_hat, caches = tiny_forward(prm, x_t, tfeat, tokens, cf, want_cache=True)
    B = x_t.shape[0]
    resid = eps_hat - eps_true
    loss = float((resid ** 2).sum() / B)
    grads = tiny_backward(prm, caches, 2.0 * resid / B)
    return loss, grads


def loss_only(prm, x_t, tfeat, tokens, cf, eps_true):
    eps_hat = tiny_forward(prm, x_t, tfeat, tokens, cf)
    return float(((eps_hat - eps_true) ** 2).sum() / x_t.shape[0])


def make_training_set(n_scenes: int, identities, settings, H: int, W: int, seed: int):
    """Single-figure scenes: clean image, token stack, control map."""
    rng = np.random.default_rng(seed)
    identities = list(identities)
    settings = list(settings)
    samples = []
    for i in range(n_scenes):
        ident = identities[i % len(identities)]
        setting = settings[rng.integers(len(settings))]
        height = rng.uniform(0.5, 0.7) * H
        cx = rng.uniform(0.3 * W, 0.7 * W)
        cy = rng.uniform(0.46 * H, 0.54 * H)
        pose = make_figure_pose(cx, cy, height, rng=rng, jitter=0.02)
        kp = pose.keypoints.copy()
        kp[:, 0] = np.clip(kp[:, 0], 1.0, W - 2.0)
        kp[:, 1] = np.clip(kp[:, 1], 1.0, H - 2.0)
        pose = type(pose)(kp, pose.format)
        img = render_scene([pose], [ident], setting, H, W)
        tokens = embed_tokens([ident, setting])
        cf = pose_control(pose, H, W).pose_map
        samples.append(dict(image=img, tokens=tokens, cf=cf,
                            identity=ident, setting=setting, pose=pose))
    return samples


class Adam:
    def __init__(self, prm, lr=2e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in prm.items()}
        self.v = {k: np.zeros_like(v) for k, v in prm.items()}
        self.t = 0

    def step(self, prm, grads):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k in prm:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            prm[k] -= self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


def train_tiny_denoiser(dataset, sched: NoiseSchedule, epochs: int, seed: int,
                        batch_size: int = 8, lr: float = 2e-3,
                        cfg: TinyConfig = TinyConfig(), dtype=np.float32, log=None):
    """Minimize the noise-prediction MSE over uniformly sampled timesteps.

    Returns (params, history); history records per-epoch mean loss. Raises
    DIVERGENCE if the loss goes non-finite.
    """
    rng = np.random.default_rng(seed)
    prm = init_params(seed, cfg, dtype=dtype)
    opt = Adam(prm, lr=lr)
    n = len(dataset)
    images = np.stack([s["image"] for s in dataset]).astype(dtype)
    tokens = np.stack([s["tokens"] for s in dataset]).astype(dtype)
    cfs = np.stack([s["cf"] for s in dataset]).astype(dtype)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(dtype)
            abar = sched.alpha_bar[t][:, None, None, None].astype(dtype)
            x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
            tfeat = time_features(t, sched).astype(dtype)
            loss, grads = loss_and_grads(prm, x_t, tfeat, tokens[idx], cfs[idx], eps)
            if not np.isfinite(loss):
                raise DomainError("DIVERGENCE", f"loss became non-finite at epoch {epoch}")
            opt.step(prm, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, history[-1])
    return prm, history
