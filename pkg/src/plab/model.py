"""Desk-scale networks: a mini vision transformer and a capacity-matched MLP.

Both models expose the same surface: named parameter groups (one tensor per
group, tagged for optimizer scoping), a differentiable ``forward``, and
read-only activation probes. Per-task classification heads keep the
task-incremental setting honest: training one task never touches another
task's head.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .seeding import derive_rng, trunc_normal

INIT_STD = 0.02


@dataclass(frozen=True)
class MiniViTConfig:
    image_side: int = 16
    patch_side: int = 4
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 2
    ffn_hidden: int = 64
    tasks: int = 20
    classes_per_task: int = 2

    def __post_init__(self):
        for name in ("image_side", "patch_side", "embed_dim", "heads", "blocks",
                     "ffn_hidden", "tasks", "classes_per_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ffn_hidden < self.embed_dim:
            raise ConfigError(f"ffn_hidden {self.ffn_hidden} < embed_dim {self.embed_dim}")

    @property
    def patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def tokens(self) -> int:
        return self.patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass(frozen=True)
class MlpConfig:
    image_side: int = 16
    hidden: int = 33
    tasks: int = 20
    classes_per_task: int = 2

    def __post_init__(self):
        for name in ("image_side", "hidden", "tasks", "classes_per_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class ParamGroup:
    name: str
    tensor: Tensor
    scope_tags: frozenset[str]
    block_index: int | None = None


@dataclass
class ActivationProbe:
    """Read-only snapshots of layer activations for one probe batch."""

    batch_size: int
    features: dict[str, np.ndarray] = field(default_factory=dict)
    cls_trace: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class FfnSite:
    """One replaceable hidden layer: unit j = column j of ``incoming``."""

    name: str
    block: int
    incoming: str
    incoming_bias: str
    outgoing: tuple[str, ...]
    capture: str
    units: int


def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """(B, S, S) images -> (B, n_patches, patch_side**2) rows, row-major patches."""
    b, s, s2 = images.shape
    if s != s2 or s % patch_side != 0:
        raise ContractError(f"cannot patchify shape {images.shape} with patch {patch_side}")
    g = s // patch_side
    x = images.reshape(b, g, patch_side, g, patch_side)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4).reshape(b, g * g, patch_side * patch_side))


def _vit_group_specs(cfg: MiniViTConfig):
    """(name, shape, init kind, tags, block) for every trainable tensor."""
    e, f, p2 = cfg.embed_dim, cfg.ffn_hidden, cfg.patch_side**2
    specs = [
        ("embed.patch", (p2, e), "proj", {"embed"}, None),
        ("embed.patch_b", (e,), "zero", {"embed"}, None),
        ("embed.cls", (e,), "zero", {"embed"}, None),
        ("embed.pos", (cfg.tokens, e), "pos", {"embed"}, None),
    ]
    for i in range(cfg.blocks):
        pre = f"block{i}"
        specs += [
            (f"{pre}.norm1.g", (e,), "one", {"norm"}, i),
            (f"{pre}.norm1.b", (e,), "zero", {"norm"}, i),
            (f"{pre}.attn.q", (e, e), "proj", {"attn", "qkv_q"}, i),
            (f"{pre}.attn.q_b", (e,), "zero", {"attn", "qkv_q"}, i),
            (f"{pre}.attn.k", (e, e), "proj", {"attn", "qkv_k"}, i),
            (f"{pre}.attn.k_b", (e,), "zero", {"attn", "qkv_k"}, i),
            (f"{pre}.attn.v", (e, e), "proj", {"attn", "qkv_v"}, i),
            (f"{pre}.attn.v_b", (e,), "zero", {"attn", "qkv_v"}, i),
            (f"{pre}.attn.proj", (e, e), "proj", {"attn", "proj"}, i),
            (f"{pre}.attn.proj_b", (e,), "zero", {"attn", "proj"}, i),
            (f"{pre}.norm2.g", (e,), "one", {"norm"}, i),
            (f"{pre}.norm2.b", (e,), "zero", {"norm"}, i),
            (f"{pre}.ffn.fc1", (e, f), "proj", {"ffn"}, i),
            (f"{pre}.ffn.fc1_b", (f,), "zero", {"ffn"}, i),
            (f"{pre}.ffn.fc2", (f, e), "proj", {"ffn"}, i),
            (f"{pre}.ffn.fc2_b", (e,), "zero", {"ffn"}, i),
        ]
    for t in range(cfg.tasks):
        specs += [
            (f"head.task{t}", (e, cfg.classes_per_task), "proj", {"head"}, None),
            (f"head.task{t}_b", (cfg.classes_per_task,), "zero", {"head"}, None),
        ]
    return specs


def _mlp_group_specs(cfg: MlpConfig):
    d, h = cfg.image_side**2, cfg.hidden
    specs = [
        ("mlp.fc1", (d, h), "proj", {"ffn"}, 0),
        ("mlp.fc1_b", (h,), "zero", {"ffn"}, 0),
        ("mlp.fc2", (h, h), "proj", {"ffn"}, 1),
        ("mlp.fc2_b", (h,), "zero", {"ffn"}, 1),
    ]
    for t in range(cfg.tasks):
        specs += [
            (f"head.task{t}", (h, cfg.classes_per_task), "proj", {"head"}, None),
            (f"head.task{t}_b", (cfg.classes_per_task,), "zero", {"head"}, None),
        ]
    return specs


def _init_array(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    if kind == "proj":
        return trunc_normal(rng, shape, INIT_STD)
    if kind == "pos":
        return rng.normal(0.0, INIT_STD, size=shape)
    if kind == "one":
        return np.ones(shape, dtype=np.float64)
    return np.zeros(shape, dtype=np.float64)


class _ModelBase:
    kind = ""

    def __init__(self, config, seed: int):
        self.config = config
        self.groups: dict[str, ParamGroup] = {}
        for name, shape, init, tags, block in self._group_specs():
            t = Tensor(np.zeros(shape), requires_grad=True)
            self.groups[name] = ParamGroup(name, t, frozenset(tags), block)
        self.reinitialize(seed)

    def _group_specs(self):
        raise NotImplementedError

    def reinitialize(self, seed: int) -> "_ModelBase":
        """Redraw every group from its init distribution (deterministic per seed)."""
        rng = derive_rng(seed)
        for (name, shape, init, tags, block) in self._group_specs():
            self.groups[name].tensor.data = _init_array(rng, shape, init)
        return self

    def param(self, name: str) -> Tensor:
        return self.groups[name].tensor

    def num_params(self) -> int:
        return sum(g.tensor.data.size for g in self.groups.values())

    def trainable_groups(self, task: int, frozen_blocks=()) -> list[ParamGroup]:
        """Groups updated while training ``task``.

        Other tasks' heads are excluded (per-task heads are disjoint). The
        embedding stem freezes together with block 0.
        """
        frozen = set(frozen_blocks)
        out = []
        for g in self.groups.values():
            if "head" in g.scope_tags:
                if g.name in (f"head.task{task}", f"head.task{task}_b"):
                    out.append(g)
                continue
            if g.block_index is None:
                if 0 in frozen:
                    continue
            elif g.block_index in frozen:
                continue
            out.append(g)
        return out


class MiniViT(_ModelBase):
    kind = "mini_vit"

    def _group_specs(self):
        return _vit_group_specs(self.config)

    @property
    def ffn_sites(self) -> list[FfnSite]:
        sites = []
        for i in range(self.config.blocks):
            sites.append(FfnSite(
                name=f"block{i}.ffn.fc1",
                block=i,
                incoming=f"block{i}.ffn.fc1",
                incoming_bias=f"block{i}.ffn.fc1_b",
                outgoing=(f"block{i}.ffn.fc2",),
                capture=f"block{i}.ffn.fc1",
                units=self.config.ffn_hidden,
            ))
        return sites

    def forward(self, images: np.ndarray, task: int, capture: ActivationProbe | None = None) -> Tensor:
        """Logits of shape (batch, classes_per_task) for the given task head."""
        cfg = self.config
        self._check_task(task)
        b = images.shape[0]
        tok = cfg.tokens
        e = cfg.embed_dim

        patches = Tensor(patchify(images, cfg.patch_side).reshape(b * cfg.patches, -1))
        x = ad.add(ad.matmul(patches, self.param("embed.patch")), self.param("embed.patch_b"))
        x = ad.reshape(x, (b, cfg.patches, e))
        cls = ad.reshape(ad.tile_leading(self.param("embed.cls"), b), (b, 1, e))
        x = ad.concat([cls, x], axis=1)
        x = ad.add(x, self.param("embed.pos"))
        self._trace_cls(capture, x.data)

        for i in range(cfg.blocks):
            x = self._block(x, i, b, capture)
            self._trace_cls(capture, x.data)

        cls_out = ad.reshape(ad.slice_(x, (slice(None), slice(0, 1))), (b, e))
        logits = ad.add(ad.matmul(cls_out, self.param(f"head.task{task}")),
                        self.param(f"head.task{task}_b"))
        self._trace_cls(capture, logits.data)
        return logits

    def _block(self, x: Tensor, i: int, b: int, capture: ActivationProbe | None) -> Tensor:
        cfg = self.config
        tok, e, h, hd = cfg.tokens, cfg.embed_dim, cfg.heads, cfg.head_dim
        pre = f"block{i}"

        n1 = ad.add(ad.mul(ad.layernorm(x), self.param(f"{pre}.norm1.g")), self.param(f"{pre}.norm1.b"))
        self._capture(capture, f"{pre}.norm1", n1.data.reshape(b * tok, e))
        flat = ad.reshape(n1, (b * tok, e))

        def heads_of(name):
            y = ad.add(ad.matmul(flat, self.param(f"{pre}.attn.{name}")),
                       self.param(f"{pre}.attn.{name}_b"))
            return ad.permute(ad.reshape(y, (b, tok, h, hd)), (0, 2, 1, 3))

        q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
        scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.reshape(ad.permute(ctx, (0, 2, 1, 3)), (b * tok, e))
        attn_out = ad.add(ad.matmul(ctx, self.param(f"{pre}.attn.proj")), self.param(f"{pre}.attn.proj_b"))
        self._capture(capture, f"{pre}.attn_out", attn_out.data)

        x = ad.add(x, ad.reshape(attn_out, (b, tok, e)))
        self._capture(capture, f"{pre}.resid1", x.data.reshape(b * tok, e))

        n2 = ad.add(ad.mul(ad.layernorm(x), self.param(f"{pre}.norm2.g")), self.param(f"{pre}.norm2.b"))
        self._capture(capture, f"{pre}.norm2", n2.data.reshape(b * tok, e))
        h1 = ad.gelu(ad.add(ad.matmul(ad.reshape(n2, (b * tok, e)), self.param(f"{pre}.ffn.fc1")),
                            self.param(f"{pre}.ffn.fc1_b")))
        self._capture(capture, f"{pre}.ffn.fc1", h1.data)
        h2 = ad.add(ad.matmul(h1, self.param(f"{pre}.ffn.fc2")), self.param(f"{pre}.ffn.fc2_b"))
        self._capture(capture, f"{pre}.ffn.fc2", h2.data)

        x = ad.add(x, ad.reshape(h2, (b, tok, e)))
        self._capture(capture, f"{pre}.resid2", x.data.reshape(b * tok, e))
        return x

    def _check_task(self, task: int):
        if not 0 <= task < self.config.tasks:
            raise ContractError(f"task {task} outside 0..{self.config.tasks - 1}")

    @staticmethod
    def _capture(capture: ActivationProbe | None, name: str, arr: np.ndarray):
        if capture is not None:
            capture.features[name] = np.array(arr, copy=True)

    @staticmethod
    def _trace_cls(capture: ActivationProbe | None, x: np.ndarray):
        if capture is not None:
            if x.ndim == 3:
                capture.cls_trace.append(np.array(x[:, 0, :], copy=True))
            else:
                capture.cls_trace.append(np.array(x, copy=True))


class Mlp(_ModelBase):
    kind = "mlp"

    def _group_specs(self):
        return _mlp_group_specs(self.config)

    @property
    def ffn_sites(self) -> list[FfnSite]:
        heads = tuple(f"head.task{t}" for t in range(self.config.tasks))
        return [
            FfnSite("mlp.fc1", 0, "mlp.fc1", "mlp.fc1_b", ("mlp.fc2",), "mlp.fc1", self.config.hidden),
            FfnSite("mlp.fc2", 1, "mlp.fc2", "mlp.fc2_b", heads, "mlp.fc2", self.config.hidden),
        ]

    def forward(self, images: np.ndarray, task: int, capture: ActivationProbe | None = None) -> Tensor:
        if not 0 <= task < self.config.tasks:
            raise ContractError(f"task {task} outside 0..{self.config.tasks - 1}")
        b = images.shape[0]
        x = Tensor(images.reshape(b, -1))
        h1 = ad.gelu(ad.add(ad.matmul(x, self.param("mlp.fc1")), self.param("mlp.fc1_b")))
        if capture is not None:
            capture.features["mlp.fc1"] = np.array(h1.data, copy=True)
        h2 = ad.gelu(ad.add(ad.matmul(h1, self.param("mlp.fc2")), self.param("mlp.fc2_b")))
        if capture is not None:
            capture.features["mlp.fc2"] = np.array(h2.data, copy=True)
        return ad.add(ad.matmul(h2, self.param(f"head.task{task}")), self.param(f"head.task{task}_b"))


def build(config: MiniViTConfig, seed: int) -> MiniViT:
    return MiniViT(config, seed)


def build_mlp(config: MlpConfig, seed: int) -> Mlp:
    return Mlp(config, seed)


def reinitialize(model: _ModelBase, seed: int) -> _ModelBase:
    """Redraw all parameter groups; optimizer state must be reset by the caller."""
    return model.reinitialize(seed)


def probe_activations(model: _ModelBase, batch: np.ndarray, task: int = 0) -> ActivationProbe:
    """Run a read-only forward and capture per-layer activations and CLS vectors."""
    if batch.shape[0] < 1:
        raise ContractError("probe batch must be nonempty")
    probe = ActivationProbe(batch_size=int(batch.shape[0]))
    model.forward(batch, task, capture=probe)
    return probe


def matched_mlp_config(vit: MiniViTConfig, tolerance: float = 0.05) -> MlpConfig:
    """Two-hidden-layer MLP whose parameter count matches a one-block ViT.

    The hidden width is searched, not hand-tuned; raises if no width gets
    within the tolerance.
    """
    ref = MiniViTConfig(**{**_asdict(vit), "blocks": 1})
    target = sum(int(np.prod(shape)) for _, shape, *_ in _vit_group_specs(ref))

    def count(h: int) -> int:
        cfg = MlpConfig(image_side=vit.image_side, hidden=h,
                        tasks=vit.tasks, classes_per_task=vit.classes_per_task)
        return sum(int(np.prod(shape)) for _, shape, *_ in _mlp_group_specs(cfg))

    best = min(range(1, 4096), key=lambda h: abs(count(h) - target))
    if abs(count(best) - target) > tolerance * target:
        raise ConfigError(f"no MLP width within {tolerance:.0%} of {target} parameters")
    return MlpConfig(image_side=vit.image_side, hidden=best,
                     tasks=vit.tasks, classes_per_task=vit.classes_per_task)


def _asdict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def save_model(model: _ModelBase, path: str) -> None:
    """Checkpoint: config header + per-group shape and flat float64 data.

    Plain JSON round-trips float64 bit-exactly (shortest-repr floats).
    """
    obj = {
        "kind": model.kind,
        "config": _asdict(model.config),
        "groups": {
            name: {"shape": list(g.tensor.data.shape), "data": g.tensor.data.ravel().tolist()}
            for name, g in model.groups.items()
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str) -> _ModelBase:
    with open(path) as fh:
        obj = json.load(fh)
    if obj["kind"] == "mini_vit":
        model: _ModelBase = MiniViT(MiniViTConfig(**obj["config"]), seed=0)
    elif obj["kind"] == "mlp":
        model = Mlp(MlpConfig(**obj["config"]), seed=0)
    else:
        raise ConfigError(f"unknown model kind {obj['kind']!r}")
    for name, entry in obj["groups"].items():
        if name not in model.groups:
            raise ConfigError(f"checkpoint group {name!r} not in model")
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != model.groups[name].tensor.data.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name!r}")
        model.groups[name].tensor.data = arr
    return model
