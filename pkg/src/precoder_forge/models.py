"""VAE and conditional VAE over packed precoding matrices.

Both models share one container, ``GenerativeModel``, holding an encoder
and a decoder, plus a prior network for the conditional kind.  A precoder
``W`` enters the networks as ``pack(W)`` (length ``d_data = 2 n q``) and a
channel ``H`` as ``pack(H.T)`` of the same length.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import pack, pack_batch, pack_channel, unpack_batch
from .errors import ConfigError, DimensionError, NonFiniteError
from .nn import GaussianHead, NetworkSpec
from .rng import make_rng
from .se import project_power, spectral_efficiency

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GenerativeModel:
    kind: str  # "vae" or "cvae"
    n: int
    q: int
    d_model: int
    nets: dict  # name -> (NetworkSpec, ParameterStore)

    @property
    def d_data(self):
        return 2 * self.n * self.q

    @property
    def conditional(self):
        return self.kind == "cvae"

    def spec(self, name):
        return self.nets[name][0]

    def params(self, name):
        return self.nets[name][1]


def make_model(kind, n=16, q=4, d_model=64, hidden=(256, 256), activation="relu",
               skip=True, seed=0):
    """Build an untrained model.

    Conditional networks take the packed channel as the trailing part of
    their input; with ``skip`` it is re-fed to every later layer too.
    """
    if kind not in ("vae", "cvae"):
        raise ConfigError(f"model kind must be 'vae' or 'cvae', got {kind!r}")
    d = 2 * n * q
    c = d if kind == "cvae" else 0
    sk = c if skip else 0
    specs = {
        "encoder": NetworkSpec(d + c, hidden, d_model, activation, sk),
        "decoder": NetworkSpec(d_model + c, hidden, d, activation, sk),
    }
    if kind == "cvae":
        specs["prior"] = NetworkSpec(c, hidden, d_model, activation, sk)
    nets = {name: (s, nn.init_params(s, seed, name)) for name, s in specs.items()}
    return GenerativeModel(kind, n, q, d_model, nets)


def make_vae(n=16, q=4, **kw):
    return make_model("vae", n, q, **kw)


def make_cvae(n=16, q=4, **kw):
    return make_model("cvae", n, q, **kw)


# ---- Gaussian algebra -----------------------------------------------------

def kl_to_standard(head):
    """KL( N(mu, s2 I) || N(0, I) ) with one variance shared over dimensions."""
    mu = np.asarray(head.mean)
    lv = np.asarray(head.log_variance)
    d = mu.shape[-1]
    return 0.5 * (np.sum(mu * mu, axis=-1) + d * np.exp(lv) - d - d * lv)


def kl_gaussians(q_head, p_head):
    """KL( N(mu_q, s2_q I) || N(mu_p, s2_p I) ), shared scalar variances."""
    mq, mp = np.asarray(q_head.mean), np.asarray(p_head.mean)
    if mq.shape != mp.shape:
        raise DimensionError(f"head dimensions differ: {mq.shape} vs {mp.shape}")
    lq, lp = np.asarray(q_head.log_variance), np.asarray(p_head.log_variance)
    d = mq.shape[-1]
    diff = mq - mp
    return 0.5 * (d * np.exp(lq - lp) + np.sum(diff * diff, axis=-1) * np.exp(-lp) - d + d * (lp - lq))


def reparameterize(head, noise):
    """``mu + noise * exp(log_variance / 2)``."""
    mu = np.asarray(head.mean)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape:
        raise DimensionError(f"noise shape {noise.shape} != mean shape {mu.shape}")
    sigma = np.exp(0.5 * np.asarray(head.log_variance))
    return mu + noise * np.expand_dims(sigma, -1)


def gaussian_log_density(x, head):
    """log N(x | mu, s2 I), full normalization included."""
    x = np.asarray(x)
    d = x.shape[-1]
    lv = np.asarray(head.log_variance)
    r = x - head.mean
    return -0.5 * (d * LOG_2PI + d * lv + np.sum(r * r, axis=-1) * np.exp(-lv))


# ---- bound and gradients --------------------------------------------------

def _check_batch(model, W_batch, H_batch):
    x = np.atleast_2d(np.asarray(W_batch, dtype=np.float64))
    if x.shape[1] != model.d_data:
        raise DimensionError(f"packed precoders must have width {model.d_data}, got {x.shape[1]}")
    h = None
    if model.conditional:
        if H_batch is None:
            raise ConfigError("conditional model needs channel inputs")
        h = np.atleast_2d(np.asarray(H_batch, dtype=np.float64))
        if h.shape[1] != model.d_data:
            raise DimensionError(f"packed channels must have width {model.d_data}, got {h.shape[1]}")
        if h.shape[0] == 1 and x.shape[0] > 1:
            h = np.repeat(h, x.shape[0], axis=0)
        if h.shape[0] != x.shape[0]:
            raise DimensionError("precoder and channel batches differ in size")
    return x, h


def _cat(a, h):
    return a if h is None else np.concatenate([a, h], axis=1)


def loss_and_grad(model, W_batch, H_batch=None, noise=None, kl_weight=1.0, need_grad=True):
    """Negative mean VLB of a batch and its parameter gradients.

    ``noise`` is the standard normal draw used for the reparameterized latent,
    shape ``(B, d_model)``.  Returns ``(terms, grads)`` where ``terms`` holds
    per-sample arrays ``vlb``, ``recon`` and ``kl`` and ``grads`` maps network
    name to a flat gradient of ``mean(kl_weight * kl - recon)``.
    """
    x, h = _check_batch(model, W_batch, H_batch)
    B = x.shape[0]
    if noise is None:
        noise = np.zeros((B, model.d_model))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (B, model.d_model):
        raise DimensionError(f"noise must have shape {(B, model.d_model)}, got {noise.shape}")
    enc_s, enc_p = model.nets["encoder"]
    dec_s, dec_p = model.nets["decoder"]
    qh, enc_cache = nn.forward(enc_s, enc_p, _cat(x, h), return_cache=True)
    z = reparameterize(qh, noise)
    ph = None
    if model.conditional:
        pri_s, pri_p = model.nets["prior"]
        ph, pri_cache = nn.forward(pri_s, pri_p, h, return_cache=True)
        kl = kl_gaussians(qh, ph)
    else:
        kl = kl_to_standard(qh)
    dh, dec_cache = nn.forward(dec_s, dec_p, _cat(z, h), return_cache=True)
    recon = gaussian_log_density(x, dh)
    terms = {"vlb": recon - kl, "recon": recon, "kl": kl, "encoder_head": qh, "prior_head": ph}
    if not need_grad:
        return terms, None

    D, d = model.d_data, model.d_model
    inv_var = np.exp(-dh.log_variance)
    r = x - dh.mean
    g_dmean = -r * inv_var[:, None] / B
    g_dlv = (0.5 * D - 0.5 * np.sum(r * r, axis=1) * inv_var) / B
    g_dec, g_dec_in = nn.backward(dec_s, dec_p, dec_cache, g_dmean, g_dlv)
    gz = g_dec_in[:, :d]
    sigma = np.exp(0.5 * qh.log_variance)
    g_qmean = gz.copy()
    g_qlv = 0.5 * sigma * np.sum(gz * noise, axis=1)
    grads = {"decoder": g_dec}
    w = kl_weight / B
    if model.conditional:
        inv_p = np.exp(-ph.log_variance)
        diff = qh.mean - ph.mean
        ratio = np.exp(qh.log_variance - ph.log_variance)
        g_qmean += w * diff * inv_p[:, None]
        g_qlv += w * 0.5 * d * (ratio - 1.0)
        g_pmean = -w * diff * inv_p[:, None]
        g_plv = w * 0.5 * (d - d * ratio - np.sum(diff * diff, axis=1) * inv_p)
        grads["prior"], _ = nn.backward(pri_s, pri_p, pri_cache, g_pmean, g_plv)
    else:
        g_qmean += w * qh.mean
        g_qlv += w * 0.5 * d * (np.exp(qh.log_variance) - 1.0)
    grads["encoder"], _ = nn.backward(enc_s, enc_p, enc_cache, g_qmean, g_qlv)
    return terms, grads


def vlb_vae(model, W_batch, noise=None, rng=None):
    """Batch-mean VLB and its per-term breakdown (single latent draw per sample)."""
    if model.conditional:
        raise ConfigError("vlb_vae needs an unconditional model")
    return _vlb(model, W_batch, None, noise, rng)


def vlb_cvae(model, W_batch, H_batch, noise=None, rng=None):
    """Conditional bound: the KL term is taken against the prior network's head."""
    if not model.conditional:
        raise ConfigError("vlb_cvae needs a conditional model")
    return _vlb(model, W_batch, H_batch, noise, rng)


def _vlb(model, W_batch, H_batch, noise, rng):
    x = np.atleast_2d(W_batch)
    if noise is None:
        noise = (rng or make_rng(0, "vlb")).standard_normal((x.shape[0], model.d_model))
    terms, _ = loss_and_grad(model, W_batch, H_batch, noise, need_grad=False)
    breakdown = {k: float(np.mean(terms[k])) for k in ("vlb", "recon", "kl")}
    return breakdown["vlb"], breakdown


# ---- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kl_warmup: bool = False
    project_outputs: bool = True


@dataclass
class TrainResult:
    model: GenerativeModel
    metrics: list = field(default_factory=list)


def _decode_mean(model, z, h):
    spec, params = model.nets["decoder"]
    return nn.forward(spec, params, _cat(z, h)).mean


def _to_precoders(model, packed, cfg, project):
    Ws = unpack_batch(packed, model.n, model.q)
    if project:
        Ws = np.stack([project_power(W, cfg) for W in Ws]) if len(Ws) else Ws
    return list(Ws)


def train(model, dataset, config=TrainConfig(), seed=0, log=None):
    """Fit ``model`` to ``dataset`` by Adam on the negative VLB.

    One reparameterized latent draw per sample per step.  Samples whose index
    falls in the hashed 10 % validation split are held out and used for the
    per-epoch reconstruction-SE metric.  ``model`` is updated in place and
    also returned inside the ``TrainResult``.
    """
    cfg = dataset.config
    if (cfg.n, cfg.q) != (model.n, model.q):
        raise ConfigError(f"dataset dims (n={cfg.n}, q={cfg.q}) do not match model "
                          f"(n={model.n}, q={model.q})")
    rng = make_rng(seed, "train")
    val = dataset.validation_mask()
    if val.all():
        val[:] = False
    x_all = dataset.w
    h_all = dataset.h_packed if model.conditional else None
    train_idx = np.flatnonzero(~val)
    val_idx = np.flatnonzero(val)
    hp = nn.AdamConfig(config.lr, config.beta1, config.beta2, config.eps)
    states = {k: nn.AdamState.zeros(p.flat.size) for k, (_, p) in model.nets.items()}
    warm = max(1, int(round(0.1 * config.epochs)))
    metrics = []
    for epoch in range(config.epochs):
        beta = min(1.0, (epoch + 1) / warm) if config.kl_warmup else 1.0
        order = rng.permutation(train_idx)
        sums = {"vlb": 0.0, "recon": 0.0, "kl": 0.0}
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(b), model.d_model))
            hb = None if h_all is None else h_all[b]
            terms, grads = loss_and_grad(model, x_all[b], hb, noise, kl_weight=beta)
            loss = float(np.mean(beta * terms["kl"] - terms["recon"]))
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, batch start {start}: "
                    f"recon={np.mean(terms['recon'])}, kl={np.mean(terms['kl'])}, loss={loss}"
                )
            for k in sums:
                sums[k] += float(np.sum(terms[k]))
            for name, g in grads.items():
                spec, params = model.nets[name]
                flat, states[name] = nn.adam_step(params.flat, g, states[name], hp)
                params.flat[...] = flat
        ntr = max(1, len(order))
        row = {"epoch": epoch + 1, "kl_weight": beta}
        row.update({k: v / ntr for k, v in sums.items()})
        if len(val_idx):
            rec = reconstruct_packed(model, x_all[val_idx], None if h_all is None else h_all[val_idx],
                                     make_rng(seed, "val-recon", epoch))
            Ws = _to_precoders(model, rec, cfg, config.project_outputs)
            row["val_recon_se"] = float(np.mean([
                spectral_efficiency(dataset.channels[dataset.channel_index[i]], W, cfg)
                for i, W in zip(val_idx, Ws)
            ]))
        else:
            row["val_recon_se"] = float("nan")
        metrics.append(row)
        if log is not None:
            log(row)
    return TrainResult(model, metrics)


# ---- sampling and reconstruction ------------------------------------------

def reconstruct_packed(model, x, h, rng):
    """Encode, draw one latent, decode the mean.  Packed in, packed out."""
    x, h = _check_batch(model, x, h)
    spec, params = model.nets["encoder"]
    qh = nn.forward(spec, params, _cat(x, h))
    z = reparameterize(qh, rng.standard_normal(qh.mean.shape))
    return _decode_mean(model, z, h)


def sample_vae(model, num, seed, cfg, project=True):
    """Decoder means at ``num`` latents drawn from N(0, I)."""
    if model.conditional:
        raise ConfigError("sample_vae needs an unconditional model")
    if num == 0:
        return []
    z = make_rng(seed, "sample-vae").standard_normal((num, model.d_model))
    return _to_precoders(model, _decode_mean(model, z, None), cfg, project)


def sample_cvae(model, H, num, seed, cfg, project=True):
    """Decoder means at ``num`` latents drawn from the prior network's head for ``H``."""
    if not model.conditional:
        raise ConfigError("sample_cvae needs a conditional model")
    H = np.asarray(H)
    if H.shape != (model.q, model.n):
        raise DimensionError(f"channel shape {H.shape} != ({model.q}, {model.n})")
    if num == 0:
        return []
    h = np.repeat(pack_channel(H)[None, :], num, axis=0)
    spec, params = model.nets["prior"]
    ph = nn.forward(spec, params, h)
    z = reparameterize(ph, make_rng(seed, "sample-cvae").standard_normal((num, model.d_model)))
    return _to_precoders(model, _decode_mean(model, z, h), cfg, project)


def reconstruct(model, W, H=None, seed=0, cfg=None, project=True):
    """Pass one precoder (or a stack of them) through encoder and decoder."""
    W = np.asarray(W)
    single = W.ndim == 2
    Ws = W[None] if single else W
    h = None
    if model.conditional:
        if H is None:
            raise ConfigError("conditional model needs a channel")
        h = pack_channel(H)[None, :]
    out = _to_precoders(model, reconstruct_packed(model, pack_batch(Ws), h, make_rng(seed, "reconstruct")),
                        cfg, project and cfg is not None)
    return out[0] if single else out


# ---- persistence ----------------------------------------------------------

def save_model(model, path, meta=None):
    """``PCNN`` checkpoint at ``path`` plus a ``path + '.json'`` sidecar."""
    info = {"kind": model.kind, "n": model.n, "q": model.q, "d_model": model.d_model,
            "d_data": model.d_data}
    info.update(meta or {})
    nn.save_checkpoint(path, model.nets, info)
    with open(str(path) + ".json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)


def load_model(path):
    nets, meta = nn.load_checkpoint(path)
    model = GenerativeModel(meta["kind"], meta["n"], meta["q"], meta["d_model"], nets)
    return model, meta
