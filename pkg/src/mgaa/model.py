"""CFEB / MGAA / classifier network built on :mod:`mgaa.autograd`.

Topology (default config)::

    (B,1,60,126) -CFEB32-> (B,32,30,63) -MGAA-> -CFEB64-> (B,64,15,31)
                 -CFEB128-> (B,128,7,15) -MGAA-> flatten 13440 -> 256 -> 64 -> 2

Parameters live in a flat ``{name: ndarray}`` dict so that checkpoints, the
optimiser and finite-difference checks can all address them by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class ShapeError(ValueError):
    """A tensor reached a pipeline stage with the wrong shape."""


@dataclass
class ModelConfig:
    cfeb_channels: Tuple[int, ...] = (32, 64, 128)
    window_set: Tuple[int, ...] = (3, 5, 7, 9)
    afm_reduction: int = 8
    afm_min_channels: int = 4
    afm_groups: int = 4
    mgaa_placement: Tuple[str, ...] = ("shallow", "deep")
    fusion: str = "adaptive"
    use_gtfa: bool = True
    use_ltfa: bool = True
    dropout_p: float = 0.3
    hidden_dims: Tuple[int, ...] = (256, 64)
    n_classes: int = 2
    in_channels: int = 1
    n_freq: int = 60
    n_frames: int = 126
    bn_momentum: float = 0.1

    def __post_init__(self):
        for name in ("cfeb_channels", "window_set", "mgaa_placement", "hidden_dims"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self) -> "ModelConfig":
        if len(self.cfeb_channels) != 3 or any(c < 1 for c in self.cfeb_channels):
            raise ConfigError(f"cfeb_channels must be three positive ints, got {self.cfeb_channels}")
        if self.use_ltfa:
            if not self.window_set:
                raise ConfigError("window_set is empty but LTFA is enabled")
            for k in self.window_set:
                if k < 3 or k % 2 == 0:
                    raise ConfigError(f"window sizes must be odd and >= 3, got {k}")
        if not (self.use_gtfa or self.use_ltfa) and self.mgaa_placement:
            raise ConfigError("MGAA placed but both GTFA and LTFA branches are disabled")
        bad = set(self.mgaa_placement) - {"shallow", "deep"}
        if bad:
            raise ConfigError(f"unknown MGAA placement(s): {sorted(bad)}")
        if self.fusion not in ("adaptive", "fixed_equal"):
            raise ConfigError(f"fusion must be 'adaptive' or 'fixed_equal', got {self.fusion!r}")
        if self.afm_reduction < 1 or self.afm_groups < 1 or self.afm_min_channels < 1:
            raise ConfigError("afm_reduction, afm_groups and afm_min_channels must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if len(self.hidden_dims) != 2 or self.n_classes < 2:
            raise ConfigError("classifier needs two hidden widths and >= 2 classes")
        f, t = self.n_freq, self.n_frames
        for stage in range(3):
            if f < 2 or t < 2:
                raise ConfigError(f"input {self.n_freq}x{self.n_frames} too small for CFEB stage {stage + 1}")
            f, t = f // 2, t // 2
        return self

    @property
    def n_branches(self) -> int:
        return int(self.use_gtfa) + (len(self.window_set) if self.use_ltfa else 0)

    def stage_shapes(self) -> List[Tuple[int, int, int]]:
        """(C, F, T) after each CFEB stage."""
        shapes = []
        f, t = self.n_freq, self.n_frames
        for c in self.cfeb_channels:
            f, t = f // 2, t // 2
            shapes.append((c, f, t))
        return shapes

    @property
    def flat_dim(self) -> int:
        c, f, t = self.stage_shapes()[-1]
        return c * f * t

    def afm_width(self, channels: int) -> int:
        return max(channels // self.afm_reduction, self.afm_min_channels)

    def afm_group_count(self, channels: int) -> int:
        """Group-norm groups for the AFM bottleneck.

        The pooled map is 1x1, so a group holding a single channel normalises
        to a constant and cuts the weights off from the input. Use the
        largest divisor of the width that is <= afm_groups and keeps at least
        two channels per group.
        """
        width = self.afm_width(channels)
        for g in range(min(self.afm_groups, width), 0, -1):
            if width % g == 0 and (width // g >= 2 or width == 1):
                return g
        return 1

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# blocks (each takes Tensors for inputs and parameters)


def cfeb_forward(
    x: Tensor,
    w: Tensor,
    b: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
) -> Tensor:
    """conv3x3(pad 1) -> batch norm -> ReLU -> 2x2 max pool (stride 2, floor).

    ReLU is monotone, so it is applied after the pool: same values, same
    gradients, a quarter of the memory.
    """
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"CFEB input spatial dims {x.shape[2:]} must both be >= 2")
    h = ag.conv2d(x, w, b, padding=(1, 1))
    h = ag.batch_norm(h, gamma, beta, running_mean, running_var, training, momentum)
    return ag.relu(ag.max_pool2d(h, 2))


def gtfa_forward(x: Tensor, vf_w, vf_b, vt_w, vt_b, return_maps: bool = False):
    """Global branch: sigmoid gates from frequency- and time-pooled summaries.

    The frequency-pooled map (B,C,1,T) broadcasts over F; the time-pooled map
    (B,C,F,1) broadcasts over T.
    """
    freq_map = ag.pointwise_gate(ag.mean(x, 2), vf_w, vf_b)
    time_map = ag.pointwise_gate(ag.mean(x, 3), vt_w, vt_b)
    out = ag.gated_product(x, freq_map, time_map)
    if return_maps:
        return out, (freq_map.data, time_map.data)
    return out


def ltfa_forward(
    x: Tensor,
    dwf_w, dwf_b, vf_w, vf_b,
    dwt_w, dwt_b, vt_w, vt_b,
    return_maps: bool = False,
):
    """Local branch for one window size k: (k,1) and (1,k) depthwise convs, each
    followed by a pointwise conv and a sigmoid gate."""
    k = dwf_w.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"LTFA window size must be odd, got {k}")
    p = (k - 1) // 2
    fmap = ag.pointwise_gate(ag.depthwise_conv2d(x, dwf_w, dwf_b, (p, 0)), vf_w, vf_b)
    tmap = ag.pointwise_gate(ag.depthwise_conv2d(x, dwt_w, dwt_b, (0, p)), vt_w, vt_b)
    out = ag.gated_product(x, fmap, tmap)
    if return_maps:
        return out, (fmap.data, tmap.data)
    return out


def afm_weights(x: Tensor, vr_w, vr_b, gn_gamma, gn_beta, vg_w, vg_b, groups: int) -> Tensor:
    """Branch weights (B, n+1): softmax(V_g * relu(GN(V_r * globalpool(x))))."""
    pooled = ag.mean(x, (2, 3))  # B,C,1,1
    h = ag.pointwise_conv(pooled, vr_w, vr_b)
    h = ag.relu(ag.group_norm(h, gn_gamma, gn_beta, groups))
    logits = ag.pointwise_conv(h, vg_w, vg_b)
    return ag.softmax(ag.reshape(logits, (x.shape[0], vg_w.shape[0])), axis=1)


def classifier_forward(
    flat: Tensor,
    p: Dict[str, Tensor],
    buffers: Dict[str, np.ndarray],
    training: bool,
    dropout_p: float,
    rng: Optional[np.random.Generator],
    momentum: float = 0.1,
) -> Tensor:
    """W3 . relu(BN(W2 . dropout(relu(BN(W1 . F)))))."""
    d = p["cls.fc1.w"].shape[1]
    if flat.ndim != 2 or flat.shape[1] != d:
        raise ShapeError(f"classifier: expected (B, {d}) input, got {flat.shape}")
    h = ag.linear(flat, p["cls.fc1.w"], p["cls.fc1.b"])
    h = ag.batch_norm(h, p["cls.bn1.gamma"], p["cls.bn1.beta"], buffers["cls.bn1.mean"], buffers["cls.bn1.var"], training, momentum)
    h = ag.dropout(ag.relu(h), dropout_p, rng, training)
    h = ag.linear(h, p["cls.fc2.w"], p["cls.fc2.b"])
    h = ag.batch_norm(h, p["cls.bn2.gamma"], p["cls.bn2.beta"], buffers["cls.bn2.mean"], buffers["cls.bn2.var"], training, momentum)
    h = ag.relu(h)
    return ag.linear(h, p["cls.fc3.w"], p["cls.fc3.b"])


# ---------------------------------------------------------------------------
# parameters


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # torch's default for conv/linear: a=sqrt(5) -> bound = 1/sqrt(fan_in)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mgaa_param_specs(cfg: ModelConfig, prefix: str, c: int):
    """Yield (name, shape, fan_in, kind) for one MGAA block at width c."""
    if cfg.use_gtfa:
        for ax in ("f", "t"):
            yield f"{prefix}.gtfa.v{ax}.w", (c, c), c, "w"
            yield f"{prefix}.gtfa.v{ax}.b", (c,), c, "w"
    if cfg.use_ltfa:
        for k in cfg.window_set:
            base = f"{prefix}.ltfa{k}"
            yield f"{base}.dwf.w", (c, k, 1), k, "w"
            yield f"{base}.dwf.b", (c,), k, "w"
            yield f"{base}.vf.w", (c, c), c, "w"
            yield f"{base}.vf.b", (c,), c, "w"
            yield f"{base}.dwt.w", (c, 1, k), k, "w"
            yield f"{base}.dwt.b", (c,), k, "w"
            yield f"{base}.vt.w", (c, c), c, "w"
            yield f"{base}.vt.b", (c,), c, "w"
    if cfg.fusion == "adaptive":
        r = cfg.afm_width(c)
        n = cfg.n_branches
        yield f"{prefix}.afm.vr.w", (r, c), c, "w"
        yield f"{prefix}.afm.vr.b", (r,), c, "w"
        yield f"{prefix}.afm.gn.gamma", (r,), 0, "one"
        yield f"{prefix}.afm.gn.beta", (r,), 0, "zero"
        yield f"{prefix}.afm.vg.w", (n, r), 0, "zero"
        yield f"{prefix}.afm.vg.b", (n,), 0, "zero"


def param_specs(cfg: ModelConfig):
    """Ordered (name, shape, fan_in, init-kind) for every trainable tensor."""
    cin = cfg.in_channels
    stages = cfg.stage_shapes()
    for s, (c, _, _) in enumerate(stages, start=1):
        yield f"cfeb{s}.conv.w", (c, cin, 3, 3), cin * 9, "w"
        yield f"cfeb{s}.conv.b", (c,), cin * 9, "w"
        yield f"cfeb{s}.bn.gamma", (c,), 0, "one"
        yield f"cfeb{s}.bn.beta", (c,), 0, "zero"
        if s == 1 and "shallow" in cfg.mgaa_placement:
            yield from _mgaa_param_specs(cfg, "mgaa_shallow", c)
        if s == 3 and "deep" in cfg.mgaa_placement:
            yield from _mgaa_param_specs(cfg, "mgaa_deep", c)
        cin = c
    dims = [cfg.flat_dim, *cfg.hidden_dims, cfg.n_classes]
    for i in range(3):
        yield f"cls.fc{i + 1}.w", (dims[i + 1], dims[i]), dims[i], "w"
        yield f"cls.fc{i + 1}.b", (dims[i + 1],), dims[i], "w"
        if i < 2:
            yield f"cls.bn{i + 1}.gamma", (dims[i + 1],), 0, "one"
            yield f"cls.bn{i + 1}.beta", (dims[i + 1],), 0, "zero"


def buffer_specs(cfg: ModelConfig):
    for s, (c, _, _) in enumerate(cfg.stage_shapes(), start=1):
        yield f"cfeb{s}.bn.mean", c, 0.0
        yield f"cfeb{s}.bn.var", c, 1.0
    for i, h in enumerate(cfg.hidden_dims, start=1):
        yield f"cls.bn{i}.mean", h, 0.0
        yield f"cls.bn{i}.var", h, 1.0


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32):
    """Fresh (params, buffers) for ``cfg``; deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape, fan_in, kind in param_specs(cfg):
        if kind == "w":
            arr = _kaiming_uniform(rng, shape, fan_in)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    buffers = {name: np.full(n, v, dtype=dtype) for name, n, v in buffer_specs(cfg)}
    return params, buffers


def count_params(params: Dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))


# ---------------------------------------------------------------------------
# full network


def mgaa_forward(
    x: Tensor,
    p: Dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    taps: Optional[dict] = None,
) -> Tensor:
    """Convex combination of the global and local attention branches."""
    branches: List[Tensor] = []
    maps = []
    if cfg.use_gtfa:
        out, m = gtfa_forward(
            x, p[f"{prefix}.gtfa.vf.w"], p[f"{prefix}.gtfa.vf.b"], p[f"{prefix}.gtfa.vt.w"], p[f"{prefix}.gtfa.vt.b"],
            return_maps=True,
        )
        branches.append(out)
        maps.append(m)
    if cfg.use_ltfa:
        for k in cfg.window_set:
            b = f"{prefix}.ltfa{k}"
            out, m = ltfa_forward(
                x,
                p[f"{b}.dwf.w"], p[f"{b}.dwf.b"], p[f"{b}.vf.w"], p[f"{b}.vf.b"],
                p[f"{b}.dwt.w"], p[f"{b}.dwt.b"], p[f"{b}.vt.w"], p[f"{b}.vt.b"],
                return_maps=True,
            )
            branches.append(out)
            maps.append(m)
    if not branches:
        raise ConfigError("MGAA with no enabled branch")
    if cfg.fusion == "adaptive":
        w = afm_weights(
            x,
            p[f"{prefix}.afm.vr.w"], p[f"{prefix}.afm.vr.b"],
            p[f"{prefix}.afm.gn.gamma"], p[f"{prefix}.afm.gn.beta"],
            p[f"{prefix}.afm.vg.w"], p[f"{prefix}.afm.vg.b"],
            groups=cfg.afm_group_count(x.shape[1]),
        )
    else:
        n = len(branches)
        w = Tensor(np.full((x.shape[0], n), 1.0 / n, dtype=x.data.dtype))
    if taps is not None:
        taps[f"{prefix}.maps"] = maps
        taps[f"{prefix}.weights"] = w.data
    if len(branches) == 1:
        # the simplex has one point; skip the multiply so output is exact
        return branches[0]
    return ag.weighted_sum(w, branches)


class MGAANet:
    """Parameter container plus forward/embedding passes."""

    def __init__(self, cfg: ModelConfig, params=None, buffers=None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        if params is None:
            params, buffers = init_params(cfg, seed, dtype)
        expected = {name: shape for name, shape, _, _ in param_specs(cfg)}
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter table mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeError(f"parameter {name}: expected {shape}, got {params[name].shape}")
        self.params: Dict[str, np.ndarray] = params
        self.buffers: Dict[str, np.ndarray] = buffers

    @property
    def n_params(self) -> int:
        return count_params(self.params)

    def tensors(self) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def _check(self, stage: str, t: Tensor, expected: Tuple[int, ...]):
        if tuple(t.shape[1:]) != tuple(expected):
            raise ShapeError(f"stage {stage}: expected (B, {', '.join(map(str, expected))}), got {t.shape}")

    def features(
        self,
        x,
        p: Optional[Dict[str, Tensor]] = None,
        training: bool = False,
        taps: Optional[dict] = None,
    ) -> Tensor:
        """Everything before the classifier: returns flattened X_d_m (B, d)."""
        cfg = self.cfg
        p = p if p is not None else {k: Tensor(v) for k, v in self.params.items()}
        x = ag.as_tensor(x)
        self._check("input", x, (cfg.in_channels, cfg.n_freq, cfg.n_frames))
        shapes = cfg.stage_shapes()
        h = x
        for s, shape in enumerate(shapes, start=1):
            h = cfeb_forward(
                h, p[f"cfeb{s}.conv.w"], p[f"cfeb{s}.conv.b"], p[f"cfeb{s}.bn.gamma"], p[f"cfeb{s}.bn.beta"],
                self.buffers[f"cfeb{s}.bn.mean"], self.buffers[f"cfeb{s}.bn.var"], training, cfg.bn_momentum,
            )
            self._check(f"cfeb{s}", h, shape)
            if taps is not None:
                taps[f"cfeb{s}"] = h.shape
            if s == 1 and "shallow" in cfg.mgaa_placement:
                h = mgaa_forward(h, p, "mgaa_shallow", cfg, taps)
                self._check("mgaa_shallow", h, shape)
            if s == 3 and "deep" in cfg.mgaa_placement:
                h = mgaa_forward(h, p, "mgaa_deep", cfg, taps)
                self._check("mgaa_deep", h, shape)
        flat = ag.flatten(h)
        self._check("flatten", flat, (cfg.flat_dim,))
        return flat

    def forward(
        self,
        x,
        p: Optional[Dict[str, Tensor]] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        taps: Optional[dict] = None,
    ) -> Tensor:
        """Logits (B, n_classes). ``rng`` drives dropout in training mode."""
        p = p if p is not None else {k: Tensor(v) for k, v in self.params.items()}
        if training and rng is None:
            rng = np.random.default_rng()
        flat = self.features(x, p, training, taps)
        logits = self.head(flat, p, training, rng)
        self._check("classifier", logits, (self.cfg.n_classes,))
        return logits

    def head(self, flat, p=None, training: bool = False, rng=None) -> Tensor:
        p = p if p is not None else {k: Tensor(v) for k, v in self.params.items()}
        return classifier_forward(ag.as_tensor(flat), p, self.buffers, training, self.cfg.dropout_p, rng, self.cfg.bn_momentum)

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = [self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def embed(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode flattened pre-classifier features, (B, flat_dim)."""
        outs = [self.features(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def scores(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Softmax probability of the 'fake' class (index 1)."""
        logits = self.predict_logits(x, batch_size).astype(np.float64)
        return np.exp(ag.log_softmax(logits, axis=1)[:, 1])


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """argmax over classes; ties go to the lower index (real)."""
    return np.argmax(logits, axis=1)


# Structural ablation variants, keyed by letter.
ABLATIONS: Dict[str, dict] = {
    "a": dict(mgaa_placement=()),
    "b": dict(use_ltfa=False),
    "c": dict(use_gtfa=False),
    "d": dict(mgaa_placement=("shallow",)),
    "e": dict(mgaa_placement=("deep",)),
    "f": dict(fusion="fixed_equal"),
    "g": dict(window_set=(3, 5)),
    "h": dict(window_set=(3, 5, 7)),
    "i": dict(window_set=(3, 5, 7, 9, 11)),
    "j": dict(),
}


def ablation_config(letter: str, **overrides) -> ModelConfig:
    if letter not in ABLATIONS:
        raise ConfigError(f"unknown ablation {letter!r}; choose from {sorted(ABLATIONS)}")
    kw = dict(ABLATIONS[letter])
    kw.update(overrides)
    return ModelConfig(**kw).validate()
