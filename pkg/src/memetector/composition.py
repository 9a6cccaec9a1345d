"""Regular-class composition scenarios and paired train/val/test splits.

The regular class mixes visual parts (V) with web-scraped images that
either contain text (Rp) or not (Ra). ``P_W`` is the web-scraped share and
``P_T`` the text-bearing share of the web-scraped images.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

POOLS = ("M", "V", "Rp", "Ra")
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.85, 0.05, 0.10)
FRACTIONS = (Fraction(0), Fraction(1, 3), Fraction(2, 3), Fraction(1))


class PoolExhausted(ValueError):
    def __init__(self, pool: str, needed: int, available: int):
        super().__init__(f"pool {pool} has {available} records, {needed} needed")
        self.pool = pool
        self.needed = needed
        self.available = available


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class PoolRecord:
    id: str
    path: str
    pool: str

    def __post_init__(self):
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")


@dataclass(frozen=True)
class Scenario:
    pw: Fraction
    pt: Fraction

    def __post_init__(self):
        object.__setattr__(self, "pw", Fraction(self.pw))
        object.__setattr__(self, "pt", Fraction(self.pt))
        if self.pw not in FRACTIONS or self.pt not in FRACTIONS:
            raise ValueError(f"P_W and P_T must be one of 0, 1/3, 2/3, 1; got {self.pw}, {self.pt}")
        if self.pw == 0 and self.pt != 0:
            raise ValueError("P_T must be 0 when P_W is 0")

    @property
    def label(self) -> str:
        return f"({percent(self.pw)}, {percent(self.pt)})"

    def as_dict(self) -> dict:
        return {"pw": str(self.pw), "pt": str(self.pt)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(parse_fraction(d["pw"]), parse_fraction(d["pt"]))


def percent(f: Fraction) -> str:
    return f"{round(float(f) * 100)}%"


def parse_fraction(text) -> Fraction:
    """Accept '1/3', '0.33', '33%', '67%' and the like; snap to the grid."""
    if isinstance(text, Fraction):
        return text
    s = str(text).strip()
    if s.endswith("%"):
        value = float(s[:-1]) / 100.0
    elif "/" in s:
        value = float(Fraction(s))
    else:
        value = float(s)
    best = min(FRACTIONS, key=lambda f: abs(float(f) - value))
    if abs(float(best) - value) > 0.02:
        raise ValueError(f"{text!r} is not one of 0, 1/3, 2/3, 1")
    return best


def scenario_table() -> list[Scenario]:
    table = [Scenario(0, 0)]
    for pw in FRACTIONS[1:]:
        for pt in FRACTIONS:
            table.append(Scenario(pw, pt))
    return table


def crossed_scenarios() -> list[tuple[Scenario, Scenario]]:
    table = scenario_table()
    return list(itertools.product(table, table))


def scenario_counts(scenario: Scenario, k: int) -> tuple[int, int, int]:
    """(n_V, n_p, n_a) for class size ``k``; the rounding remainder goes to the last pool used."""
    n_v = math.floor(k * (1 - scenario.pw))
    if scenario.pt == 1:
        return n_v, k - n_v, 0
    n_p = math.floor(k * scenario.pw * scenario.pt)
    return n_v, n_p, k - n_v - n_p


def _sample(records: Sequence[PoolRecord], n: int, pool: str, rng: np.random.Generator) -> list[PoolRecord]:
    if n > len(records):
        raise PoolExhausted(pool, n, len(records))
    if n == 0:
        return []
    idx = rng.choice(len(records), size=n, replace=False)
    return [records[i] for i in idx]


def compose_regular_class(
    pools: Mapping[str, Sequence[PoolRecord]],
    scenario: Scenario,
    k: int,
    seed: int,
) -> list[PoolRecord]:
    n_v, n_p, n_a = scenario_counts(scenario, k)
    rng = np.random.default_rng(seed)
    out = []
    for pool, n in (("V", n_v), ("Rp", n_p), ("Ra", n_a)):
        out.extend(_sample(list(pools.get(pool, ())), n, pool, rng))
    return out


def split_sizes(k: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    n_train = math.floor(ratios[0] * k)
    n_val = math.floor(ratios[1] * k)
    return n_train, n_val, k - n_train - n_val


def split_ids(ids: Sequence[str], seed: int, ratios=SPLIT_RATIOS) -> dict[str, str]:
    ids = sorted(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    assignment = {}
    for rank, i in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignment[ids[i]] = split
    return assignment


def paired_split(
    memes: Sequence[PoolRecord],
    vparts: Sequence[PoolRecord],
    seed: int,
    ratios=SPLIT_RATIOS,
) -> dict[str, str]:
    """One shared id -> split assignment for memes and their visual parts."""
    m_ids = [r.id for r in memes]
    v_ids = [r.id for r in vparts]
    if len(set(m_ids)) != len(m_ids) or len(set(v_ids)) != len(v_ids):
        raise PairingError("duplicate ids within the meme or visual-part pool")
    if set(m_ids) != set(v_ids):
        missing = sorted(set(m_ids) ^ set(v_ids))[:5]
        raise PairingError(f"meme and visual-part ids differ, e.g. {missing}")
    return split_ids(m_ids, seed, ratios)


# -- manifests -----------------------------------------------------------------
@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: str
    pool: str
    split: str

    def as_dict(self) -> dict:
        return {"id": self.id, "path": self.path, "label": self.label, "pool": self.pool, "split": self.split}


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    scenario: Scenario
    k: int
    seed: int = 0

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, int]:
        out = {}
        for r in self.records:
            out[r.label] = out.get(r.label, 0) + 1
        return out

    def dumps(self) -> str:
        meta = {"type": "meta", "scenario": self.scenario.as_dict(), "seed": self.seed, "k": self.k}
        lines = [json.dumps(meta, sort_keys=True)]
        lines += [json.dumps(r.as_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not lines or lines[0].get("type") != "meta":
            raise ValueError("manifest must start with a meta record")
        meta = lines[0]
        records = [ManifestRecord(d["id"], d["path"], d["label"], d["pool"], d["split"]) for d in lines[1:]]
        return cls(records, Scenario.from_dict(meta["scenario"]), int(meta["k"]), int(meta.get("seed", 0)))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def build_manifest(
    memes: Sequence[PoolRecord],
    vparts: Sequence[PoolRecord],
    web_text: Sequence[PoolRecord],
    web_notext: Sequence[PoolRecord],
    scenario: Scenario,
    seed: int,
    k: int | None = None,
) -> DatasetManifest:
    """Split every pool 85/5/10, then compose the regular class per split.

    Memes and visual parts share one index split. When ``k`` is smaller than
    the number of meme/visual-part pairs a seeded subset of ``k`` pairs is kept.
    """
    paired_split(memes, vparts, seed)  # validates pairing
    ss = np.random.SeedSequence(seed)
    s_subset, s_pair, s_text, s_notext, s_compose = (int(c.generate_state(1)[0]) for c in ss.spawn(5))

    ids = sorted(r.id for r in memes)
    if k is None:
        k = len(ids)
    if k > len(ids):
        raise PoolExhausted("M", k, len(ids))
    if k < len(ids):
        keep = np.random.default_rng(s_subset).choice(len(ids), size=k, replace=False)
        ids = sorted(ids[i] for i in keep)
    kept = set(ids)
    memes = sorted((r for r in memes if r.id in kept), key=lambda r: r.id)
    vparts = sorted((r for r in vparts if r.id in kept), key=lambda r: r.id)

    pair_split = paired_split(memes, vparts, s_pair)
    text_split = split_ids([r.id for r in web_text], s_text)
    notext_split = split_ids([r.id for r in web_notext], s_notext)

    records: list[ManifestRecord] = [ManifestRecord(r.id, r.path, "meme", "M", pair_split[r.id]) for r in memes]
    for i, split in enumerate(SPLITS):
        pools = {
            "V": [r for r in vparts if pair_split[r.id] == split],
            "Rp": sorted((r for r in web_text if text_split[r.id] == split), key=lambda r: r.id),
            "Ra": sorted((r for r in web_notext if notext_split[r.id] == split), key=lambda r: r.id),
        }
        k_split = sum(1 for r in memes if pair_split[r.id] == split)
        chosen = compose_regular_class(pools, scenario, k_split, s_compose + i)
        records += [ManifestRecord(r.id, r.path, "regular", r.pool, split) for r in chosen]
    return DatasetManifest(records, scenario, k, seed)


def read_pool(path, pool: str) -> list[PoolRecord]:
    """Read a pool listing.

    ``path`` may be a directory of images (id = file stem), a JSON Lines file
    of ``{"id", "path"}`` objects, or a text file with one image path per line.
    Relative paths in listings resolve against the listing's directory.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        return [PoolRecord(p.stem, str(p), pool) for p in files]
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            d = json.loads(line)
            if d.get("type") == "meta":
                continue
            p = Path(d["path"])
            ident = str(d.get("id", p.stem))
        else:
            p = Path(line)
            ident = p.stem
        if not p.is_absolute():
            p = path.parent / p
        out.append(PoolRecord(ident, str(p), pool))
    return out


def check_manifest(manifest: DatasetManifest) -> list[str]:
    """Return a list of invariant violations (empty when the manifest is sound)."""
    problems = []
    counts = manifest.counts()
    if counts.get("meme", 0) != manifest.k or counts.get("regular", 0) != manifest.k:
        problems.append(f"class sizes {counts} differ from k={manifest.k}")
    seen: dict[tuple[str, str], str] = {}
    for r in manifest.records:
        key = (r.pool, r.id)
        if key in seen:
            problems.append(f"duplicate record {key}")
        seen[key] = r.split
    for (pool, ident), split in seen.items():
        if pool == "V" and seen.get(("M", ident), split) != split:
            problems.append(f"pair {ident} split across {seen[('M', ident)]} and {split}")
    return problems


def iter_pools(records: Iterable[PoolRecord]) -> dict[str, list[PoolRecord]]:
    out: dict[str, list[PoolRecord]] = {p: [] for p in POOLS}
    for r in records:
        out[r.pool].append(r)
    return out
