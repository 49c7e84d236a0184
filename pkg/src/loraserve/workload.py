"""Seeded request generators: arrivals, lengths and adapter popularity."""
import math
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import numpy as np

POPULARITIES = ("distinct", "uniform", "skewed", "identical")


@dataclass(frozen=True)
class LengthTable:
    prompt: np.ndarray
    output: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if len(self.prompt) == 0:
            raise ValueError("length table is empty")
        if not (len(self.prompt) == len(self.output) == len(self.weight)):
            raise ValueError("length table columns differ in size")
        if np.any(self.prompt < 1) or np.any(self.output < 1):
            raise ValueError("lengths must be >= 1")
        if np.any(self.weight < 0) or self.weight.sum() <= 0:
            raise ValueError("weights must be non-negative with a positive total")

    @classmethod
    def fixed(cls, prompt_len, output_len):
        return cls(np.array([prompt_len]), np.array([output_len]), np.array([1.0]))

    @property
    def mean_output(self):
        return float((self.output * self.weight).sum() / self.weight.sum())

    @property
    def mean_prompt(self):
        return float((self.prompt * self.weight).sum() / self.weight.sum())


def parse_length_table(text, source="<table>"):
    """Rows of ``prompt_len,output_len,weight``; ``#`` starts a comment."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"{source}:{lineno}: expected prompt_len,output_len,weight")
        try:
            rows.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise ValueError(f"{source}:{lineno}: non-numeric field in {raw.strip()!r}") from None
    if not rows:
        raise ValueError(f"{source}: length table is empty")
    arr = np.array(rows, dtype=np.float64)
    return LengthTable(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2])


def load_length_table(path=None):
    if path is None:
        text = resources.files("loraserve").joinpath("data/sharegpt_synthetic.csv").read_text()
        return parse_length_table(text, "sharegpt_synthetic.csv")
    with open(path) as fh:
        return parse_length_table(fh.read(), str(path))


@dataclass(frozen=True)
class ArrivalSpec:
    kind: str = "poisson"          # poisson | ramp | trace
    rate: float = 1.0
    profile: tuple = ()            # ((t, rate), ...) piecewise linear, ramp only
    trace: tuple = ()

    def __post_init__(self):
        if self.kind == "poisson" and not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.kind == "ramp":
            if len(self.profile) < 2 or not any(r > 0 for _, r in self.profile):
                raise ValueError("ramp profile needs two points and a positive rate")
        if self.kind not in ("poisson", "ramp", "trace"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")

    def rate_at(self, t):
        ts = [p[0] for p in self.profile]
        rs = [p[1] for p in self.profile]
        return float(np.interp(t, ts, rs, left=0.0, right=0.0))


@dataclass(frozen=True)
class WorkloadSpec:
    num_requests: Optional[int]
    arrival: ArrivalSpec
    lengths: LengthTable
    popularity: str = "skewed"
    alpha: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.popularity not in POPULARITIES:
            raise ValueError(f"unknown popularity {self.popularity!r}")
        if self.popularity == "skewed" and not self.alpha > 1:
            raise ValueError("Zipf alpha must exceed 1")


@dataclass(frozen=True)
class RequestSpec:
    arrival_time: float
    lora_id: int
    prompt_len: int
    output_len: int


def _streams(seed):
    # independent streams so changing one draw never shifts another
    arr, lens, pop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(arr), np.random.default_rng(lens), np.random.default_rng(pop)


def zipf_model_count(num_requests, alpha):
    """Ranks whose expected request count stays >= 1 under ratio ``alpha``."""
    if num_requests < 1:
        return 1
    top = num_requests * (1.0 - 1.0 / alpha)
    if top <= 1:
        return 1
    return int(math.floor(math.log(top) / math.log(alpha))) + 1


def zipf_weights(num_models, alpha):
    """p_i proportional to alpha^-i: each rank is alpha times the next."""
    w = alpha ** -np.arange(num_models, dtype=np.float64)
    return w / w.sum()


def assign_models(num_requests, popularity, seed, alpha=1.5, rng=None):
    """Adapter id per request; id 0 is the most popular under Skewed."""
    if num_requests < 1:
        raise ValueError("need at least one request")
    rng = rng if rng is not None else _streams(seed)[2]
    n = num_requests
    if popularity == "distinct":
        return rng.permutation(n)
    if popularity == "uniform":
        m = math.ceil(math.sqrt(n))
        return rng.permutation(np.arange(n) % m)
    if popularity == "skewed":
        if not alpha > 1:
            raise ValueError("Zipf alpha must exceed 1")
        cdf = np.cumsum(zipf_weights(zipf_model_count(n, alpha), alpha))
        cdf[-1] = 1.0
        return np.searchsorted(cdf, rng.random(n), side="right")
    if popularity == "identical":
        return np.zeros(n, dtype=np.int64)
    raise ValueError(f"unknown popularity {popularity!r}")


def _ramp_arrivals(spec, rng):
    # thinning against the profile's peak rate
    t_end = spec.profile[-1][0]
    peak = max(r for _, r in spec.profile)
    out = []
    t = spec.profile[0][0]
    while True:
        t += rng.exponential(1.0 / peak)
        if t >= t_end:
            break
        if rng.random() * peak < spec.rate_at(t):
            out.append(t)
    return np.array(out)


def sample_arrivals(spec, seed=None, rng=None):
    """Sorted arrival timestamps for a WorkloadSpec."""
    rng = rng if rng is not None else _streams(spec.seed if seed is None else seed)[0]
    a = spec.arrival
    if a.kind == "poisson":
        return np.cumsum(rng.exponential(1.0 / a.rate, size=spec.num_requests))
    if a.kind == "ramp":
        times = _ramp_arrivals(a, rng)
        return times[:spec.num_requests] if spec.num_requests is not None else times
    return np.sort(np.asarray(a.trace, dtype=np.float64))


def sample_lengths(spec, n, seed=None, rng=None):
    """(prompt_len, output_len) arrays drawn i.i.d. from the table weights."""
    rng = rng if rng is not None else _streams(spec.seed if seed is None else seed)[1]
    t = spec.lengths
    idx = rng.choice(len(t.prompt), size=n, p=t.weight / t.weight.sum())
    return t.prompt[idx].astype(np.int64), t.output[idx].astype(np.int64)


def generate(spec):
    """Full request list, ordered by arrival."""
    arr_rng, len_rng, pop_rng = _streams(spec.seed)
    times = sample_arrivals(spec, rng=arr_rng)
    n = len(times)
    if n == 0:
        return []
    prompts, outputs = sample_lengths(spec, n, rng=len_rng)
    models = assign_models(n, spec.popularity, spec.seed, spec.alpha, rng=pop_rng)
    return [
        RequestSpec(float(times[i]), int(models[i]), int(prompts[i]), int(outputs[i]))
        for i in range(n)
    ]


def spec_from_config(wl):
    """WorkloadSpec from the ``workload`` group of a merged config."""
    lengths = wl["lengths"]
    if lengths["fixed"] is not None:
        table = LengthTable.fixed(*lengths["fixed"])
    else:
        table = load_length_table(lengths["table"])
    a = wl["arrival"]
    arrival = ArrivalSpec(
        kind=a["kind"],
        rate=a["rate"],
        profile=tuple(tuple(p) for p in (a["profile"] or ())),
        trace=tuple(a["trace"] or ()),
    )
    return WorkloadSpec(wl["num_requests"], arrival, table, wl["popularity"], wl["alpha"], wl["seed"])
