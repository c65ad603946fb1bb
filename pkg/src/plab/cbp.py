"""Continual-backpropagation baseline: utility-tracked FFN unit replacement.

Hidden units of the scoped FFN layers age by one per step and carry an EMA
utility (mean |activation| on the training batch times the L1 norm of the
unit's outgoing weights). Each step, among units old enough to be mature,
the floor(rate * n_eligible + carry) lowest-utility ones are replaced:
incoming weights redrawn from the init distribution, outgoing weights
zeroed (so the swap is invisible to the forward pass), age and utility
reset. The fractional carry accumulates across steps so long-run
replacement counts are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .model import INIT_STD, ActivationProbe, _ModelBase
from .seeding import derive_rng, trunc_normal

UTILITY_DECAY = 0.99

CBP_SCOPES = ("first_block", "all_blocks")


@dataclass(frozen=True)
class CbpConfig:
    maturity_threshold: int = 400
    replacement_rate: float = 1e-5
    scope: str = "all_blocks"

    def __post_init__(self):
        if self.maturity_threshold < 0:
            raise ConfigError(f"maturity_threshold must be >= 0, got {self.maturity_threshold}")
        if not 0.0 <= self.replacement_rate <= 1.0:
            raise ConfigError(f"replacement_rate must be in [0, 1], got {self.replacement_rate}")
        if self.scope not in CBP_SCOPES:
            raise ConfigError(f"scope must be one of {CBP_SCOPES}, got {self.scope!r}")


@dataclass(frozen=True)
class Replacement:
    site: str
    unit: int


class UnitLedger:
    """Age/utility bookkeeping for every scoped FFN hidden unit."""

    def __init__(self, model: _ModelBase, config: CbpConfig, seed: int):
        sites = model.ffn_sites
        if config.scope == "first_block":
            sites = [s for s in sites if s.block == 0]
        if not sites:
            raise ConfigError("model exposes no FFN sites in the requested scope")
        self.sites = sites
        self.age = {s.name: np.zeros(s.units, dtype=np.int64) for s in sites}
        self.utility = {s.name: np.zeros(s.units, dtype=np.float64) for s in sites}
        self.carry = 0.0
        self.rng = derive_rng(seed, 0xCB9)

    def total_units(self) -> int:
        return sum(s.units for s in self.sites)

    def state_obj(self) -> dict:
        return {
            "carry": self.carry,
            "age": {name: a.tolist() for name, a in self.age.items()},
            "utility": {name: u.tolist() for name, u in self.utility.items()},
        }

    def load_state_obj(self, obj: dict) -> None:
        self.carry = float(obj["carry"])
        for name, vals in obj["age"].items():
            self.age[name] = np.asarray(vals, dtype=np.int64)
        for name, vals in obj["utility"].items():
            self.utility[name] = np.asarray(vals, dtype=np.float64)


def cbp_step(model: _ModelBase, ledger: UnitLedger, config: CbpConfig,
             probe: ActivationProbe) -> list[Replacement]:
    """Age units, refresh utilities from the batch probe, replace the stale ones."""
    for site in ledger.sites:
        if site.capture not in probe.features:
            raise ContractError(f"probe lacks capture {site.capture!r} needed by CBP")
        act = probe.features[site.capture]
        out_w = model.groups[site.outgoing[0]].tensor.data
        out_l1 = np.abs(out_w).sum(axis=1)
        for extra in site.outgoing[1:]:
            out_l1 = out_l1 + np.abs(model.groups[extra].tensor.data).sum(axis=1)
        contribution = np.abs(act).mean(axis=0) * out_l1
        ledger.utility[site.name] = (
            UTILITY_DECAY * ledger.utility[site.name] + (1.0 - UTILITY_DECAY) * contribution
        )
        ledger.age[site.name] += 1

    eligible = [
        (site, idx)
        for site in ledger.sites
        for idx in np.nonzero(ledger.age[site.name] >= config.maturity_threshold)[0]
    ]
    quota = config.replacement_rate * len(eligible) + ledger.carry
    n_replace = int(np.floor(quota))
    ledger.carry = quota - n_replace
    if n_replace == 0:
        return []

    # Lowest utility first; ties broken by site order then unit index.
    order = sorted(range(len(eligible)),
                   key=lambda i: (ledger.utility[eligible[i][0].name][eligible[i][1]], i))
    actions = []
    for i in order[:n_replace]:
        site, unit = eligible[i]
        _replace_unit(model, ledger, site, int(unit))
        actions.append(Replacement(site.name, int(unit)))
    return actions


def _replace_unit(model: _ModelBase, ledger: UnitLedger, site, unit: int) -> None:
    w_in = model.groups[site.incoming].tensor.data
    w_in[:, unit] = trunc_normal(ledger.rng, (w_in.shape[0],), INIT_STD)
    model.groups[site.incoming_bias].tensor.data[unit] = 0.0
    for out_name in site.outgoing:
        model.groups[out_name].tensor.data[unit, :] = 0.0
    ledger.age[site.name][unit] = 0
    ledger.utility[site.name][unit] = 0.0
