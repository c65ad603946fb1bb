import os

import numpy as np
import pytest

import plab.autodiff as ad
from plab.autodiff import Tape
from plab.errors import ConfigError, ContractError
from plab.model import (MiniViTConfig, MlpConfig, build, build_mlp, load_model,
                        matched_mlp_config, patchify, probe_activations, reinitialize,
                        save_model)

CFG = MiniViTConfig()  # desk default: 16px, patch 4, embed 32, 4 heads, 2 blocks


def _images(batch, seed=0, side=16):
    return np.random.default_rng(seed).normal(size=(batch, side, side)) * 0.5


def test_config_invariants_named():
    with pytest.raises(ConfigError, match="divisible"):
        MiniViTConfig(image_side=10, patch_side=4)
    with pytest.raises(ConfigError, match="heads"):
        MiniViTConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigError, match="ffn_hidden"):
        MiniViTConfig(ffn_hidden=16)


def test_group_names_one_block():
    mdl = build(MiniViTConfig(blocks=1, tasks=3), seed=0)
    names = set(mdl.groups)
    for expected in ("block0.attn.q", "block0.attn.k", "block0.attn.v", "block0.attn.proj",
                     "block0.ffn.fc1", "block0.ffn.fc2", "embed.patch", "embed.cls",
                     "embed.pos", "head.task0", "head.task1", "head.task2"):
        assert expected in names
    assert len(names) == len(mdl.groups)  # unique by construction


def test_forward_logits_shape():
    mdl = build(CFG, seed=1)
    logits = mdl.forward(_images(4), task=0)
    assert logits.data.shape == (4, CFG.classes_per_task)
    with pytest.raises(ContractError):
        mdl.forward(_images(2), task=CFG.tasks)


def test_freezing_leaves_last_block_and_heads():
    cfg = MiniViTConfig(blocks=12, tasks=2)
    mdl = build(cfg, seed=2)
    trainable = {g.name for g in mdl.trainable_groups(task=0, frozen_blocks=range(11))}
    assert trainable == {n for n in mdl.groups
                         if n.startswith("block11.") or n in ("head.task0", "head.task0_b")}


def test_reinitialize_deterministic_and_changes_weights():
    mdl = build(CFG, seed=3)
    reinitialize(mdl, 99)
    snap = {n: g.tensor.data.copy() for n, g in mdl.groups.items()}
    reinitialize(mdl, 99)
    for n, g in mdl.groups.items():
        assert np.array_equal(g.tensor.data, snap[n])
    reinitialize(mdl, 100)
    for n, g in mdl.groups.items():
        if snap[n].std() > 0:  # constant-init groups (biases, cls, norm gains) are redrawn constant
            assert np.abs(g.tensor.data - snap[n]).max() > 0


def test_training_one_task_never_touches_other_heads():
    mdl = build(CFG, seed=4)
    before = {n: g.tensor.data.copy() for n, g in mdl.groups.items() if n.startswith("head.")}
    images, labels = _images(8, seed=5), np.array([0, 1] * 4)
    for _ in range(3):
        trainable = mdl.trainable_groups(task=2)
        with Tape() as tape:
            loss = ad.cross_entropy(mdl.forward(images, task=2), labels)
            grads = tape.gradients(loss, [g.tensor for g in trainable])
        for g in trainable:
            g.tensor.data -= 0.05 * grads[g.tensor]
    assert np.abs(mdl.groups["head.task2"].tensor.data - before["head.task2"]).max() > 0
    for n, old in before.items():
        if not n.startswith("head.task2"):
            assert np.array_equal(mdl.groups[n].tensor.data, old)


def test_probe_shapes_and_cls_trace():
    mdl = build(CFG, seed=6)
    probe = probe_activations(mdl, _images(5, seed=7), task=0)
    tokens = CFG.tokens
    assert probe.features["block1.ffn.fc1"].shape == (5 * tokens, CFG.ffn_hidden)
    assert probe.features["block0.norm1"].shape == (5 * tokens, CFG.embed_dim)
    assert len(probe.cls_trace) == CFG.blocks + 2
    assert probe.cls_trace[0].shape == (5, CFG.embed_dim)
    assert probe.cls_trace[-1].shape == (5, CFG.classes_per_task)


def test_probe_deterministic():
    mdl = build(CFG, seed=8)
    x = _images(4, seed=9)
    p1 = probe_activations(mdl, x, task=1)
    p2 = probe_activations(mdl, x, task=1)
    for k in p1.features:
        assert np.array_equal(p1.features[k], p2.features[k])


def test_token_permutation_equivariance_with_zero_pos():
    mdl = build(CFG, seed=10)
    mdl.groups["embed.pos"].tensor.data[:] = 0.0
    images = _images(3, seed=11)
    patches = patchify(images, CFG.patch_side)
    perm = np.random.default_rng(12).permutation(CFG.patches)
    permuted = patches[:, perm, :]
    g = CFG.image_side // CFG.patch_side
    back = permuted.reshape(3, g, g, CFG.patch_side, CFG.patch_side)
    images_perm = back.transpose(0, 1, 3, 2, 4).reshape(3, CFG.image_side, CFG.image_side)
    out1 = mdl.forward(images, task=0).data
    out2 = mdl.forward(images_perm, task=0).data
    assert np.abs(out1 - out2).max() <= 1e-12


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    mdl = build(CFG, seed=13)
    path = os.path.join(tmp_path, "model.json")
    save_model(mdl, path)
    back = load_model(path)
    assert back.config == mdl.config
    for n, g in mdl.groups.items():
        assert np.array_equal(back.groups[n].tensor.data, g.tensor.data)
    x = _images(2, seed=14)
    assert np.array_equal(back.forward(x, 0).data, mdl.forward(x, 0).data)


def test_matched_mlp_param_count():
    mlp_cfg = matched_mlp_config(CFG)
    one_block = build(MiniViTConfig(blocks=1), seed=0).num_params()
    got = build_mlp(mlp_cfg, seed=0).num_params()
    assert abs(got - one_block) <= 0.05 * one_block


def test_mlp_forward_and_probe():
    mdl = build_mlp(MlpConfig(hidden=20, tasks=4), seed=15)
    logits = mdl.forward(_images(6, seed=16), task=3)
    assert logits.data.shape == (6, 2)
    probe = probe_activations(mdl, _images(6, seed=17), task=0)
    assert probe.features["mlp.fc1"].shape == (6, 20)
    assert [s.name for s in mdl.ffn_sites] == ["mlp.fc1", "mlp.fc2"]


def test_patchify_layout():
    img = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 4)
    assert np.array_equal(p[0, 0], [0, 1, 4, 5])
    assert np.array_equal(p[0, 3], [10, 11, 14, 15])
