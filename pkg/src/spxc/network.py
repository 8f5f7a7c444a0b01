"""Patch-level autoregressive network and the image-level VAE.

The autoregressive model is a two-stream masked-convolution gated ResNet in
the PixelCNN++ style: a vertical stream sees all rows strictly above the
current pixel, a horizontal stream additionally sees pixels to the left in
the current row, and the output head emits per-pixel discretized-logistic
mixture parameters.  Six gated blocks form a U shape over three resolutions
(m, m/2, m/4) with skip connections; the coordinate-grid patch is resampled
by linear interpolation at every resolution change, and both the grid and
the VAE latent code enter every gated layer through tanh/sigmoid gating.

Causality is enforced structurally (shifted, padded convolutions and
zero-stuffed causal upsampling), never by runtime masking, so it holds
bit-exactly and is cheap to verify by perturbation.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import grid_axis

LOGSCALE_FLOOR = -7.0
LOGVAR_CLAMP = 10.0


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    ``channels`` counts feature maps per convolution (25 for the small
    setup, 140 for the large one); spatial kernels stay 2-3 wide.  The
    patch side must be divisible by 4 so the three-resolution U shape
    lands on whole pixels.
    """

    patch_side: int = 8
    image_side: int = 28
    blocks: int = 6
    layers_per_block: int = 2
    channels: int = 25
    mixture_components: int = 10
    latent_len: int = 60
    use_coords: bool = True
    use_vae: bool = True
    dropout: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.blocks != 6:
            raise ValueError("the architecture is defined for exactly 6 gated blocks")
        if self.patch_side % 4 != 0:
            raise ValueError("patch_side must be divisible by 4 for the 3-resolution U shape")
        if self.image_side % 4 != 0:
            raise ValueError("image_side must be divisible by 4")
        if self.channels < 1 or self.layers_per_block < 1 or self.mixture_components < 1:
            raise ValueError("channels, layers_per_block and mixture_components must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def small(cls, patch_side=8, **kw):
        return cls(patch_side=patch_side, layers_per_block=2, channels=25, **kw)

    @classmethod
    def large(cls, patch_side=16, **kw):
        return cls(patch_side=patch_side, layers_per_block=5, channels=140, **kw)

    @classmethod
    def tiny(cls, patch_side=8, **kw):
        """1 layer per block, 8 channels: for smoke tests and overfit gates."""
        return cls(patch_side=patch_side, layers_per_block=1, channels=8, **kw)


class Param(Tensor):
    __slots__ = ("name", "weight_decay")

    def __init__(self, name, data, weight_decay):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.weight_decay = weight_decay


class ParamStore:
    """Named parameter registry with one EMA shadow per parameter."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Param] = {}
        self.ema: dict[str, np.ndarray] = {}

    def create(self, name, array, weight_decay=False) -> Param:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, np.asarray(array, dtype=self.dtype), weight_decay)
        self.params[name] = p
        self.ema[name] = p.data.copy()
        return p

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def ema_update(self, decay):
        for name, p in self.params.items():
            shadow = self.ema[name]
            shadow *= decay
            shadow += (1.0 - decay) * p.data

    @contextlib.contextmanager
    def use_ema(self):
        """Temporarily evaluate with the EMA shadows in place of raw weights."""
        saved = {name: p.data for name, p in self.params.items()}
        for name, p in self.params.items():
            p.data = self.ema[name]
        try:
            yield
        finally:
            for name, p in self.params.items():
                p.data = saved[name]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _conv_init(rng, cout, cin, kh, kw):
    fan_in = cin * kh * kw
    return rng.normal(0.0, fan_in ** -0.5, size=(cout, cin, kh, kw))


def _dense_init(rng, cin, cout):
    return rng.normal(0.0, cin ** -0.5, size=(cin, cout))


class Conv:
    """Convolution with explicit asymmetric padding (NCHW)."""

    def __init__(self, store, rng, name, cin, cout, kernel, pads, stride=1, zero_init=False, bias=True):
        kh, kw = kernel
        w0 = np.zeros((cout, cin, kh, kw)) if zero_init else _conv_init(rng, cout, cin, kh, kw)
        self.w = store.create(f"{name}/w", w0, weight_decay=not zero_init)
        self.b = store.create(f"{name}/b", np.zeros(cout)) if bias else None
        self.pads = pads
        self.stride = stride

    def __call__(self, x):
        h = ad.pad2d(x, self.pads) if any(self.pads) else x
        h = ad.conv2d(h, self.w, stride=self.stride)
        if self.b is not None:
            h = ad.add(h, ad.reshape(self.b, (1, -1, 1, 1)))
        return h


def down_shifted_conv(store, rng, name, cin, cout, kernel=(2, 3), stride=1):
    kh, kw = kernel
    return Conv(store, rng, name, cin, cout, kernel, (kh - 1, 0, (kw - 1) // 2, (kw - 1) // 2), stride)


def down_right_shifted_conv(store, rng, name, cin, cout, kernel=(2, 2), stride=1):
    kh, kw = kernel
    return Conv(store, rng, name, cin, cout, kernel, (kh - 1, 0, kw - 1, 0), stride)


def nin(store, rng, name, cin, cout):
    return Conv(store, rng, name, cin, cout, (1, 1), (0, 0, 0, 0))


class Dense:
    def __init__(self, store, rng, name, cin, cout, zero_init=False, bias=True):
        w0 = np.zeros((cin, cout)) if zero_init else _dense_init(rng, cin, cout)
        self.w = store.create(f"{name}/w", w0, weight_decay=not zero_init)
        self.b = store.create(f"{name}/b", np.zeros(cout)) if bias else None

    def __call__(self, x):
        h = ad.matmul(x, self.w)
        if self.b is not None:
            h = ad.add(h, self.b)
        return h


class GatedCondition:
    """tanh/sigmoid gate with additive grid and latent conditioning.

    Given 2C pre-activation features split into halves (a, b) the output is
    ``tanh(a + Wg.g + Wz.z) * sigmoid(b + Vg.g + Vz.z)`` where the grid
    projections act per location on the 2-channel coordinate map and the
    latent projections broadcast over space.  All conditioning projections
    start at zero, so a freshly initialized gate ignores g and z.
    """

    def __init__(self, store, rng, name, channels2, cfg, with_grid=True):
        self.channels2 = channels2
        self.grid_proj = None
        self.latent_proj = None
        if with_grid and cfg.use_coords:
            self.grid_proj = Conv(store, rng, f"{name}/grid", 2, channels2, (1, 1),
                                  (0, 0, 0, 0), zero_init=True, bias=False)
        if cfg.use_vae:
            self.latent_proj = Dense(store, rng, f"{name}/latent", cfg.latent_len,
                                     channels2, zero_init=True, bias=False)

    def __call__(self, features, g=None, z=None):
        c = features
        if self.grid_proj is not None and g is not None:
            c = ad.add(c, self.grid_proj(g))
        if self.latent_proj is not None and z is not None:
            c = ad.add(c, ad.reshape(self.latent_proj(z), (-1, self.channels2, 1, 1)))
        half = self.channels2 // 2
        a = c[:, :half]
        b = c[:, half:]
        return ad.mul(ad.tanh(a), ad.sigmoid(b))


class GatedResLayer:
    """One gated residual layer of a causal stream."""

    def __init__(self, store, rng, name, conv_maker, channels, cfg, aux_channels=0):
        self.conv1 = conv_maker(store, rng, f"{name}/conv1", 2 * channels, channels)
        self.aux = None
        if aux_channels:
            self.aux = nin(store, rng, f"{name}/aux", 2 * aux_channels, channels)
        self.conv2 = conv_maker(store, rng, f"{name}/conv2", 2 * channels, 2 * channels)
        self.gate = GatedCondition(store, rng, f"{name}/gate", 2 * channels, cfg)
        self.dropout = cfg.dropout

    def __call__(self, x, a=None, g=None, z=None, train=False, rng=None):
        h = self.conv1(ad.concat_elu(x))
        if self.aux is not None and a is not None:
            h = ad.add(h, self.aux(ad.concat_elu(a)))
        h = ad.concat_elu(h)
        if train and self.dropout > 0:
            h = ad.dropout(h, self.dropout, rng)
        h = self.conv2(h)
        return ad.add(x, self.gate(h, g, z))


@dataclass
class MixtureParams:
    """Per-pixel discretized-logistic mixture parameters (K components)."""

    logit_probs: Tensor  # (B, K, H, W)
    means: Tensor        # (B, K, H, W)
    log_scales: Tensor   # (B, K, H, W), floored at LOGSCALE_FLOOR

    @property
    def num_components(self):
        return self.logit_probs.shape[1]

    @property
    def spatial_shape(self):
        return self.logit_probs.shape[2:]

    def numpy(self):
        return MixtureParams(
            Tensor(np.asarray(self.logit_probs.data)),
            Tensor(np.asarray(self.means.data)),
            Tensor(np.asarray(self.log_scales.data)),
        )


@dataclass
class PosteriorParams:
    """Diagonal Gaussian posterior over the latent code."""

    mu: Tensor      # (B, latent_len)
    logvar: Tensor  # (B, latent_len), clamped to [-LOGVAR_CLAMP, LOGVAR_CLAMP]


def resample_grid(g) -> np.ndarray:
    """Halve a coordinate-grid patch by linear interpolation.

    The output is the outer product of ``linspace(i_1, i_m, m/2)`` and
    ``linspace(j_1, j_m, m/2)`` where (i_1, j_1) and (i_m, j_m) are the
    corner coordinates of the input patch; corners are preserved exactly.
    Accepts (2, m, m) or batched (B, 2, m, m) arrays.
    """
    g = np.asarray(g)
    m = g.shape[-1]
    if m % 2 != 0 or m < 2:
        raise ValueError(f"grid side must be even and >= 2, got {m}")
    half = m // 2
    rows = np.linspace(g[..., 0, 0, 0], g[..., 0, -1, -1], half, axis=-1)
    cols = np.linspace(g[..., 1, 0, 0], g[..., 1, -1, -1], half, axis=-1)
    out_rows = np.broadcast_to(rows[..., :, None], rows.shape + (half,))
    out_cols = np.broadcast_to(cols[..., None, :], cols.shape[:-1] + (half, half))
    return np.stack([out_rows, out_cols], axis=-3)


def reparameterize(posterior: PosteriorParams, rng: np.random.Generator) -> Tensor:
    """Draw z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    mu, logvar = posterior.mu, posterior.logvar
    eps = rng.standard_normal(mu.shape).astype(mu.dtype, copy=False)
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


class PixelCNN:
    """Grid- and latent-conditioned causal network over m x m patches."""

    def __init__(self, store, cfg: NetworkConfig, rng, prefix="pcnn"):
        self.cfg = cfg
        C = cfg.channels
        L = cfg.layers_per_block
        # input carries a constant ones channel so zero padding is detectable
        self.init_v = down_shifted_conv(store, rng, f"{prefix}/init_v", 2, C, (2, 3))
        self.init_h_v = down_shifted_conv(store, rng, f"{prefix}/init_h_v", 2, C, (1, 3))
        self.init_h_h = down_right_shifted_conv(store, rng, f"{prefix}/init_h_h", 2, C, (2, 1))

        def v_conv(store, rng, name, cin, cout):
            return down_shifted_conv(store, rng, name, cin, cout, (2, 3))

        def h_conv(store, rng, name, cin, cout):
            return down_right_shifted_conv(store, rng, name, cin, cout, (2, 2))

        self.down_v, self.down_h, self.up_v, self.up_h = [], [], [], []
        for d in range(3):
            for l in range(L):
                self.down_v.append(GatedResLayer(store, rng, f"{prefix}/down{d}/l{l}/v", v_conv, C, cfg))
                self.down_h.append(GatedResLayer(store, rng, f"{prefix}/down{d}/l{l}/h", h_conv, C, cfg,
                                                 aux_channels=C))
        for d in range(3):
            for l in range(L):
                self.up_v.append(GatedResLayer(store, rng, f"{prefix}/up{d}/l{l}/v", v_conv, C, cfg,
                                               aux_channels=C))
                self.up_h.append(GatedResLayer(store, rng, f"{prefix}/up{d}/l{l}/h", h_conv, C, cfg,
                                               aux_channels=2 * C))
        self.downsample_v = [down_shifted_conv(store, rng, f"{prefix}/ds{d}/v", C, C, (2, 3), stride=2)
                             for d in range(2)]
        self.downsample_h = [down_right_shifted_conv(store, rng, f"{prefix}/ds{d}/h", C, C, (2, 2), stride=2)
                             for d in range(2)]
        self.upsample_v = [down_shifted_conv(store, rng, f"{prefix}/us{d}/v", C, C, (2, 3))
                           for d in range(2)]
        self.upsample_h = [down_right_shifted_conv(store, rng, f"{prefix}/us{d}/h", C, C, (2, 2))
                           for d in range(2)]
        self.head = nin(store, rng, f"{prefix}/head", 2 * C, 3 * cfg.mixture_components)

    def _grids(self, g, batch):
        if g is None or not self.cfg.use_coords:
            return [None, None, None]
        g = np.asarray(g)
        if g.ndim == 3:
            g = np.broadcast_to(g[None], (batch,) + g.shape)
        grids = [g]
        for _ in range(2):
            if grids[-1].shape[-1] >= 2:
                grids.append(resample_grid(grids[-1]))
            else:
                grids.append(grids[-1])
        dt = self.cfg.np_dtype
        return [Tensor(np.ascontiguousarray(x, dtype=dt)) for x in grids]

    def forward(self, y, g=None, z=None, train=False, rng=None) -> MixtureParams:
        """Map a batch of patches to per-pixel mixture parameters.

        The output at pixel i (row-major) depends only on pixels strictly
        before i, on the grid patch, and on z.  Eval mode is deterministic;
        train mode applies dropout from the supplied rng.
        """
        cfg = self.cfg
        yv = y.data if isinstance(y, Tensor) else np.asarray(y)
        if yv.ndim == 2:
            yv = yv[None, None]
        elif yv.ndim == 3:
            yv = yv[:, None]
        m = yv.shape[-1]
        if yv.shape[-2] != m:
            raise ValueError("patches must be square")
        _check_finite("patch input", yv)
        if train and rng is None:
            raise ValueError("train mode needs an rng for dropout")
        x = y if isinstance(y, Tensor) else Tensor(yv.astype(cfg.np_dtype, copy=False))
        if x.ndim != 4:
            x = ad.reshape(x, yv.shape)
        B = yv.shape[0]

        grids = self._grids(g, B)
        zt = None
        if z is not None and cfg.use_vae:
            zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=cfg.np_dtype))
            if zt.ndim == 1:
                zt = ad.reshape(zt, (1, -1))
            if zt.shape != (B, cfg.latent_len):
                raise ValueError(f"latent shape {zt.shape} does not match (batch, {cfg.latent_len})")
            _check_finite("latent input", zt.data)

        ones = Tensor(np.ones_like(x.data))
        xp = ad.concat([x, ones], axis=1)
        u = ad.shift_down(self.init_v(xp))
        ul = ad.add(ad.shift_down(self.init_h_v(xp)), ad.shift_right(self.init_h_h(xp)))

        L = cfg.layers_per_block
        skips = []
        li = 0
        for d in range(3):
            gd = grids[d]
            for _ in range(L):
                u = self.down_v[li](u, None, gd, zt, train, rng)
                ul = self.down_h[li](ul, u, gd, zt, train, rng)
                skips.append((u, ul))
                li += 1
            if d < 2:
                u = self.downsample_v[d](u)
                ul = self.downsample_h[d](ul)

        li = 0
        for d in (2, 1, 0):
            gd = grids[d]
            for _ in range(L):
                su, sul = skips.pop()
                u = self.up_v[li](u, su, gd, zt, train, rng)
                ul = self.up_h[li](ul, ad.concat([sul, u], axis=1), gd, zt, train, rng)
                li += 1
            if d > 0:
                u = self.upsample_v[d - 1](ad.zero_stuff2(u))
                ul = self.upsample_h[d - 1](ad.zero_stuff2(ul))

        out = self.head(ad.concat_elu(ul))
        K = cfg.mixture_components
        return MixtureParams(
            logit_probs=out[:, :K],
            means=out[:, K:2 * K],
            log_scales=ad.maximum_const(out[:, 2 * K:], LOGSCALE_FLOOR),
        )


class _ResLayer:
    def __init__(self, store, rng, name, channels):
        self.conv1 = Conv(store, rng, name + "/c1", channels, channels, (3, 3), (1, 1, 1, 1))
        self.conv2 = Conv(store, rng, name + "/c2", channels, channels, (3, 3), (1, 1, 1, 1))

    def __call__(self, x):
        return ad.add(x, self.conv2(ad.elu(self.conv1(ad.elu(x)))))


class _CondResLayer:
    """Residual layer whose gate is conditioned on the latent code."""

    def __init__(self, store, rng, name, channels, cfg):
        self.conv1 = Conv(store, rng, name + "/c1", channels, channels, (3, 3), (1, 1, 1, 1))
        self.conv2 = Conv(store, rng, name + "/c2", channels, 2 * channels, (3, 3), (1, 1, 1, 1))
        self.gate = GatedCondition(store, rng, name + "/gate", 2 * channels, cfg, with_grid=False)

    def __call__(self, x, z):
        h = self.conv2(ad.elu(self.conv1(ad.elu(x))))
        return ad.add(x, self.gate(h, None, z))


class Encoder:
    """ResNet encoder mapping a full image to posterior parameters."""

    def __init__(self, store, cfg: NetworkConfig, rng, prefix="enc"):
        self.cfg = cfg
        C = cfg.channels
        n = cfg.image_side
        self.stem = Conv(store, rng, f"{prefix}/stem", 1, C, (3, 3), (1, 1, 1, 1), stride=2)
        self.res1 = _ResLayer(store, rng, f"{prefix}/res1", C)
        self.down = Conv(store, rng, f"{prefix}/down", C, C, (3, 3), (1, 1, 1, 1), stride=2)
        self.res2 = _ResLayer(store, rng, f"{prefix}/res2", C)
        self.flat = (n // 4) * (n // 4) * C
        self.out = Dense(store, rng, f"{prefix}/out", self.flat, 2 * cfg.latent_len)

    def __call__(self, x) -> PosteriorParams:
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        if xt.ndim == 2:
            xt = ad.reshape(xt, (1, 1) + xt.shape)
        elif xt.ndim == 3:
            xt = ad.reshape(xt, (xt.shape[0], 1) + xt.shape[1:])
        if xt.shape[-1] != self.cfg.image_side:
            raise ValueError(f"encoder expects full {self.cfg.image_side}-pixel images")
        h = self.res2(self.down(self.res1(self.stem(xt))))
        h = ad.reshape(ad.elu(h), (xt.shape[0], self.flat))
        h = self.out(h)
        L = self.cfg.latent_len
        return PosteriorParams(mu=h[:, :L], logvar=ad.clip(h[:, L:], -LOGVAR_CLAMP, LOGVAR_CLAMP))


class Decoder:
    """Latent-conditioned ResNet decoder emitting per-pixel logistic params."""

    def __init__(self, store, cfg: NetworkConfig, rng, prefix="dec"):
        self.cfg = cfg
        C = cfg.channels
        Cf = max(C // 2, 8)  # cheaper width at full resolution
        n = cfg.image_side
        self.base = n // 4
        self.stem = Dense(store, rng, f"{prefix}/stem", cfg.latent_len, self.base * self.base * C)
        self.res1 = _CondResLayer(store, rng, f"{prefix}/res1", C, cfg)
        self.up1 = Conv(store, rng, f"{prefix}/up1", C, C, (3, 3), (1, 1, 1, 1))
        self.res2 = _CondResLayer(store, rng, f"{prefix}/res2", C, cfg)
        self.up2 = Conv(store, rng, f"{prefix}/up2", C, Cf, (3, 3), (1, 1, 1, 1))
        self.res3 = _CondResLayer(store, rng, f"{prefix}/res3", Cf, cfg)
        self.head = nin(store, rng, f"{prefix}/head", Cf, 2)

    def __call__(self, z) -> MixtureParams:
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.cfg.np_dtype))
        if zt.ndim == 1:
            zt = ad.reshape(zt, (1, -1))
        B = zt.shape[0]
        h = ad.reshape(self.stem(zt), (B, self.cfg.channels, self.base, self.base))
        h = self.res1(h, zt)
        h = self.up1(ad.upsample_nearest2(ad.elu(h)))
        h = self.res2(h, zt)
        h = self.up2(ad.upsample_nearest2(ad.elu(h)))
        h = self.res3(h, zt)
        out = self.head(ad.elu(h))
        n = self.cfg.image_side
        zeros = Tensor(np.zeros((B, 1, n, n), dtype=self.cfg.np_dtype))
        return MixtureParams(
            logit_probs=zeros,
            means=out[:, 0:1],
            log_scales=ad.maximum_const(out[:, 1:2], LOGSCALE_FLOOR),
        )


class PatchModel:
    """The full model: patch network plus (optionally) the VAE."""

    def __init__(self, cfg: NetworkConfig, seed=0):
        self.cfg = cfg
        self.store = ParamStore(cfg.np_dtype)
        rng = np.random.default_rng([seed, 0xA11])
        self.pcnn = PixelCNN(self.store, cfg, rng)
        self.encoder = Encoder(self.store, cfg, rng) if cfg.use_vae else None
        self.decoder = Decoder(self.store, cfg, rng) if cfg.use_vae else None

    def pcnn_forward(self, y, g=None, z=None, train=False, rng=None) -> MixtureParams:
        return self.pcnn.forward(y, g=g, z=z, train=train, rng=rng)

    def vae_encode(self, x) -> PosteriorParams:
        if self.encoder is None:
            raise RuntimeError("model was built without a VAE")
        return self.encoder(x)

    def vae_decode(self, z) -> MixtureParams:
        if self.decoder is None:
            raise RuntimeError("model was built without a VAE")
        return self.decoder(z)

    def encode_mean(self, x) -> np.ndarray:
        """Posterior mean of a batch of images (no gradient)."""
        with ad.no_grad():
            return self.vae_encode(x).mu.data

    def param_count(self) -> int:
        return self.store.param_count()
