"""Batch experiment driver.

Commands: run, mc, iterate, attack, oracle, verify-appendix, amplify.
Reports are JSON lines, one object per trial followed by one object with
``"kind": "aggregate"``.  Exit codes: 0 success, 2 configuration error,
3 an invariant violation was detected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import __version__, amplify
from .bits import BitString, RandomnessLedger, SeededRng, random_bits
from .devices import (
    AbortLeak,
    ClassicalTable,
    HonestQuantum,
    NlBox,
    ONLY_ALL_P,
    EXCEPT_ALL_P,
    build_ensemble,
    eve_predictions,
)
from .errors import ConfigError, PrivexError, TooFewSamples
from .nonlocal_tests import classical_max_pass_probability, make_test
from .protocol import (
    ProtocolConfig,
    abort_leak_assessment,
    block_size,
    expansion_report,
    heuristic_margin,
    predicted_ratio,
    run_iterated,
    run_protocol1,
)
from .quantum import canonical_instance, random_canonical_spec, verify_ghz_relations, verify_structure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

STRATEGIES = ("honest", "classical", "abort-leak", "nlbox")
COMMANDS = ("run", "mc", "iterate", "attack", "oracle", "verify-appendix", "amplify")
DEVICE_STREAM = 1


@dataclass
class ExperimentConfig:
    strategy: str = "honest"
    k: int = 1
    input_bits: int = 300
    zeta: float = 1e-3
    delta: float = 1e-2
    epsilon: float = 0.0
    gamma: str = "heuristic"
    mode: str = "abort"
    include_x1: bool = True
    trusted: bool = False
    trials: int = 1
    seed: int = 0
    stages: int = 2
    targets: str = "0"
    leak_mode: str = ONLY_ALL_P
    hash_t: int = 2
    hash_input: str = ""
    hash_key: str = ""
    family: str = amplify.TOEPLITZ
    workers: int = 1

    @property
    def gamma_policy(self) -> str | int:
        return int(self.gamma) if self.gamma.isdigit() else self.gamma

    @property
    def target_rounds(self) -> frozenset[int]:
        return frozenset(int(t) for t in self.targets.split(",") if t.strip())

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(
            zeta=self.zeta, delta=self.delta, epsilon=self.epsilon, k=self.k,
            mode=self.mode, include_x1_in_hash=self.include_x1,
            gamma_policy=self.gamma_policy, trusted=self.trusted)

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw):
    kind = _FIELD_TYPES[name]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(name, f"cannot parse {text!r} as {kind}") from None
    return text


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError("config", str(exc)) from None
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config", f"line {number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(key, f"unknown key on line {number}")
        values[key] = _coerce(key, value)
    return values


def validate(cfg: ExperimentConfig, command: str) -> None:
    if cfg.strategy not in STRATEGIES:
        raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}")
    try:
        make_test(cfg.k)
    except PrivexError as exc:
        raise ConfigError("k", str(exc)) from None
    if cfg.mode not in ("abort", "tally"):
        raise ConfigError("mode", "must be abort or tally")
    if not (cfg.gamma in ("heuristic", "zero") or cfg.gamma.isdigit()):
        raise ConfigError("gamma", "must be heuristic, zero, or a nonnegative integer")
    if not 0 <= cfg.zeta <= 1:
        raise ConfigError("zeta", "must lie in [0, 1]")
    if not 0 < cfg.delta <= 1:
        raise ConfigError("delta", "must lie in (0, 1]")
    if not 0 <= cfg.epsilon < 1:
        raise ConfigError("epsilon", "must lie in [0, 1)")
    if cfg.gamma == "heuristic" and not cfg.trusted and cfg.delta <= cfg.epsilon:
        raise ConfigError("delta", "must exceed epsilon for the heuristic gamma")
    if cfg.trials < 1:
        raise ConfigError("trials", "must be at least 1")
    if cfg.seed < 0:
        raise ConfigError("seed", "must be nonnegative")
    if cfg.stages < 1:
        raise ConfigError("stages", "must be at least 1")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be at least 1")
    try:
        cfg.protocol_config()
    except PrivexError as exc:
        raise ConfigError("gamma", str(exc)) from None
    if cfg.leak_mode not in (ONLY_ALL_P, EXCEPT_ALL_P):
        raise ConfigError("leak_mode", f"must be {ONLY_ALL_P} or {EXCEPT_ALL_P}")
    try:
        targets = cfg.target_rounds
    except ValueError:
        raise ConfigError("targets", "must be comma-separated round indices") from None
    if any(t < 0 for t in targets):
        raise ConfigError("targets", "round indices are nonnegative")
    if cfg.family not in amplify.FAMILIES:
        raise ConfigError("family", f"must be one of {', '.join(amplify.FAMILIES)}")
    if command in ("run", "mc", "iterate", "attack"):
        unit = block_size(cfg.protocol_config())
        if cfg.input_bits <= 0 or cfg.input_bits % unit:
            raise ConfigError("input_bits", f"must be a positive multiple of {unit}")
    if command == "oracle" and cfg.k > 2:
        raise ConfigError("k", "exhaustive classical oracle supports k <= 2")
    if command == "amplify":
        for name in ("hash_input", "hash_key"):
            text = getattr(cfg, name)
            if not text or set(text) - {"0", "1"}:
                raise ConfigError(name, "must be a non-empty bit string")
        if not 0 <= cfg.hash_t <= len(cfg.hash_input):
            raise ConfigError("hash_t", "must lie between 0 and the input length")


def strategy_spec(cfg: ExperimentConfig):
    n = make_test(cfg.k).n_devices
    if cfg.strategy == "honest":
        return HonestQuantum()
    if cfg.strategy == "classical":
        # all +1 answers meet every single-P demand and fail only all-P
        return ClassicalTable(tuple({"P": 1, "Q": 1} for _ in range(n)))
    if cfg.strategy == "abort-leak":
        return AbortLeak(cfg.target_rounds, cfg.leak_mode)
    return NlBox(None if n == 3 else (1,) * (n - 2))


def uniformity_check(samples: Sequence[BitString]) -> tuple[float, float]:
    """Chi-square statistic and p-value of equal-length samples against uniform."""
    if not samples:
        raise TooFewSamples("no samples")
    width = len(samples[0])
    if any(len(s) != width for s in samples):
        raise ValueError("samples must have equal length")
    bins = 1 << width
    if len(samples) / bins < 5:
        raise TooFewSamples(f"{len(samples)} samples over {bins} bins leaves fewer than 5 per bin")
    counts = np.bincount([s.to_int() for s in samples], minlength=bins)
    statistic, p_value = stats.chisquare(counts)
    return float(statistic), float(p_value)


def _eve_score(view, transcript) -> dict:
    out_total = out_correct = set_total = set_correct = 0
    for r, rec in enumerate(transcript.rounds):
        for device, local in enumerate(rec.setting):
            guess = view.predicted_output(r, device, local)
            if guess is not None:
                out_total += 1
                out_correct += guess == rec.outcomes[device]
        options = view.rounds[r].setting_bits
        if options is not None and len(options) == 1:
            set_total += 1
            set_correct += next(iter(options)) == str(rec.setting_bits)
    return {"output_predictions": out_total, "output_correct": out_correct,
            "setting_predictions": set_total, "setting_correct": set_correct}


@dataclass
class RunReport:
    """Per-trial records plus the terminal aggregate object."""

    trials: list[dict]
    aggregate: dict
    exit_code: int = EXIT_OK

    def records(self) -> list[dict]:
        return self.trials + [self.aggregate]

    def to_jsonl(self) -> str:
        return dumps(self.records())


def _trial(args: tuple[ExperimentConfig, int]) -> tuple[dict, list[str]]:
    cfg, index = args
    seed = cfg.seed + index
    bob = SeededRng(seed)
    device_rng = bob.derive(DEVICE_STREAM)
    test = make_test(cfg.k)
    spec = strategy_spec(cfg)
    x = random_bits(bob, cfg.input_bits)
    pconf = cfg.protocol_config()
    out, transcript, ledger = run_protocol1(x, build_ensemble(spec, test), pconf, device_rng)
    view = eve_predictions(spec, test, transcript.aborted, len(transcript.rounds))
    record = {
        "kind": "trial",
        "trial": index,
        "seed": seed,
        "aborted": out.aborted,
        "rounds": len(transcript.rounds),
        "passes": transcript.T,
        "input_bits": len(x),
        "output_bits": len(out.bits),
        "gamma": transcript.gamma,
        "ratio": len(out.bits) / len(x),
        "eve": _eve_score(view, transcript),
        "ledger": ledger.as_dict(),
    }
    decoded = [str(rec.decoded) for rec in transcript.rounds if rec.passed]
    return record, decoded


def _map_trials(cfg: ExperimentConfig):
    jobs = [(cfg, i) for i in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_trial, jobs, chunksize=16))
    return [_trial(job) for job in jobs]


def _versions() -> dict:
    return {"privex": __version__, "numpy": np.__version__}


def _base_aggregate(cfg: ExperimentConfig, command: str) -> dict:
    return {"kind": "aggregate", "command": command, "config": cfg.echo(),
            "versions": _versions(),
            "gamma_policy": "none" if cfg.trusted else cfg.protocol_config().gamma_label}


def _predicted(cfg: ExperimentConfig) -> dict:
    test = make_test(cfg.k)
    rounds = cfg.input_bits // block_size(cfg.protocol_config())
    classical = float(classical_max_pass_probability(test)) if test.n_devices <= 7 else None
    pred = {
        "classical_pass_per_round": (4 * cfg.k - 1) / (4 * cfg.k),
        "classical_pass_per_round_exact": classical,
        "classical_survival": ((4 * cfg.k - 1) / (4 * cfg.k)) ** rounds,
        "expansion_ratio_asymptotic": predicted_ratio(cfg.k, cfg.trusted),
    }
    if not cfg.trusted and cfg.gamma == "heuristic":
        margin = heuristic_margin(cfg.delta, cfg.epsilon)
        pred["margin_bits"] = margin
        pred["expansion_ratio_with_margin"] = predicted_ratio(cfg.k, False) - margin / cfg.input_bits
    return pred


def cmd_trials(cfg: ExperimentConfig, command: str) -> tuple[list[dict], int]:
    results = _map_trials(cfg)
    records = [r for r, _ in results]
    decoded = [b for _, bits in results for b in bits]
    done = [r for r in records if not r["aborted"]]
    total_rounds = sum(r["rounds"] for r in records)
    agg = _base_aggregate(cfg, command)
    agg.update({
        "trials": len(records),
        "abort_rate": 1 - len(done) / len(records),
        "round_pass_rate": sum(r["passes"] for r in records) / total_rounds if total_rounds else None,
        "mean_expansion_ratio": float(np.mean([r["ratio"] for r in done])) if done else None,
        "predicted": _predicted(cfg),
    })
    try:
        statistic, p_value = uniformity_check([BitString.from_str(b) for b in decoded])
        agg["chi_square"] = {"statistic": statistic, "p_value": p_value, "samples": len(decoded)}
    except TooFewSamples:
        agg["chi_square"] = None
    outs = [r["eve"]["output_predictions"] for r in records]
    agg["eve"] = {
        "output_predictions": sum(outs),
        "output_accuracy": (sum(r["eve"]["output_correct"] for r in records) / sum(outs)) if sum(outs) else None,
        "setting_predictions": sum(r["eve"]["setting_predictions"] for r in records),
    }
    agg["notes"] = list(expansion_report(RandomnessLedger(), cfg.protocol_config()).notes)
    violated = cfg.strategy == "honest" and any(r["aborted"] for r in records)
    agg["invariant_violation"] = "honest devices aborted" if violated else None
    return records + [agg], EXIT_INVARIANT if violated else EXIT_OK


def run_monte_carlo(cfg: ExperimentConfig) -> RunReport:
    """Validate ``cfg`` and run ``cfg.trials`` independent protocol runs."""
    validate(cfg, "mc")
    records, code = cmd_trials(cfg, "mc")
    return RunReport(records[:-1], records[-1], code)


def cmd_iterate(cfg: ExperimentConfig) -> tuple[list[dict], int]:
    records = []
    test = make_test(cfg.k)
    violated = False
    for index in range(cfg.trials):
        seed = cfg.seed + index
        bob = SeededRng(seed)
        x = random_bits(bob, cfg.input_bits)
        ensembles = [build_ensemble(strategy_spec(cfg), test) for _ in range(cfg.stages)]
        result = run_iterated(x, ensembles, cfg.protocol_config(), bob.derive(DEVICE_STREAM))
        records.append({
            "kind": "trial", "trial": index, "seed": seed, "aborted": result.aborted,
            "stages": [dataclasses.asdict(s) for s in result.stages],
            "output_bits": 0 if result.output is None else len(result.output),
            "ledger": result.ledger.as_dict(),
        })
        violated |= cfg.strategy == "honest" and result.aborted
    agg = _base_aggregate(cfg, "iterate")
    done = [r for r in records if not r["aborted"]]
    agg.update({
        "trials": len(records),
        "abort_rate": 1 - len(done) / len(records),
        "mean_final_ratio": float(np.mean([r["output_bits"] / cfg.input_bits for r in done])) if done else None,
        "notes": ["stage outputs seed the next stage; no security claim is made for the chain"],
        "invariant_violation": "honest devices aborted" if violated else None,
    })
    return records + [agg], EXIT_INVARIANT if violated else EXIT_OK


def cmd_attack(cfg: ExperimentConfig) -> tuple[list[dict], int]:
    if cfg.strategy not in ("abort-leak", "nlbox"):
        raise ConfigError("strategy", "attack demos cover abort-leak and nlbox")
    records, code = cmd_trials(cfg, "attack")
    agg = records[-1]
    test = make_test(cfg.k)
    if cfg.strategy == "nlbox":
        agg["demo"] = {"claim": "NL-box devices pass every round while Eve knows the fixed outputs",
                       "pass_rate": agg["round_pass_rate"],
                       "eve_output_accuracy": agg["eve"]["output_accuracy"]}
        if agg["round_pass_rate"] != 1.0 or agg["eve"]["output_accuracy"] != 1.0:
            agg["invariant_violation"] = "NL-box strategy failed a round or Eve mispredicted"
            code = EXIT_INVARIANT
        return records, code
    spec = strategy_spec(cfg)
    toy_bits = 2 * test.bits_per_setting
    toy_targets = frozenset(t for t in spec.targets if t < 2) or frozenset({0})
    toy = abort_leak_assessment(AbortLeak(toy_targets, spec.mode, spec.fixed_outputs),
                                test, toy_bits, t_values=(1, 2, 3))
    demo = {
        "setting_posteriors_given_pass": {str(r): p for r, p in toy.setting_posteriors.items()},
        "posterior_distance_from_uniform": {str(r): d for r, d in toy.posterior_distances.items()},
        "toy_x1_bits": toy_bits,
        "toy_p_no_abort": toy.p_no_abort,
        "toy_hmin": toy.hmin,
        "toy_leaked_bits": toy.leaked_bits,
        "toy_hash": [{"t": h.t, "distance": h.distance, "bound": h.bound, "holds": h.holds}
                     for h in toy.hash_reports],
    }
    point_mass = any(max(p.values()) == 1.0 for p in toy.setting_posteriors.values())
    demo["seed_compromised"] = (not cfg.include_x1) and point_mass
    if not all(h.holds for h in toy.hash_reports):
        agg["invariant_violation"] = "leftover-hash bound violated"
        code = EXIT_INVARIANT
    agg["demo"] = demo
    return records, code


def cmd_oracle(cfg: ExperimentConfig) -> tuple[list[dict], int]:
    test = make_test(cfg.k)
    value = classical_max_pass_probability(test)
    expected = (4 * cfg.k - 1, 4 * cfg.k)
    records = [{"kind": "trial", "check": "classical_max_pass_probability", "k": cfg.k,
                "value": f"{value.numerator}/{value.denominator}",
                "expected": f"{expected[0]}/{expected[1]}"}]
    ok = (value.numerator, value.denominator) == expected
    n = max(1, len(cfg.hash_input)) if cfg.hash_input else 4
    t = min(cfg.hash_t, n)
    collide = amplify.family_collision_check(n, t, cfg.family)
    records.append({"kind": "trial", "check": "family_collision_check", "family": cfg.family,
                    "n": n, "t": t, "max_collision": f"{collide.numerator}/{collide.denominator}",
                    "bound": f"1/{1 << t}"})
    ok &= collide <= Fraction(1, 1 << t)
    rng = np.random.default_rng(cfg.seed)
    violations = 0
    for trial in range(cfg.trials):
        probs = rng.dirichlet(np.full((1 << n) * 2, 0.3)).reshape(1 << n, 2)
        report = amplify.verify_leftover_hash(amplify.JointDistribution(probs, n), t, cfg.epsilon, cfg.family)
        violations += not report.holds
        records.append({"kind": "trial", "check": "leftover_hash", "trial": trial,
                        "distance": report.distance, "bound": report.bound, "holds": report.holds})
    ok &= violations == 0
    agg = _base_aggregate(cfg, "oracle")
    agg.update({"classical_ok": (value.numerator, value.denominator) == expected,
                "leftover_hash_violations": violations,
                "invariant_violation": None if ok else "oracle check failed"})
    return records + [agg], EXIT_OK if ok else EXIT_INVARIANT


def cmd_verify_appendix(cfg: ExperimentConfig) -> tuple[list[dict], int]:
    rng = np.random.default_rng(cfg.seed)
    records = []
    failures = 0
    for trial in range(cfg.trials):
        spec = random_canonical_spec(rng)
        state, pairs = canonical_instance(spec)
        rel = verify_ghz_relations(state, pairs)
        struct = verify_structure(state, pairs)
        failures += not (rel.passed and struct.passed)
        records.append({"kind": "trial", "trial": trial, "block_dims": list(spec.block_dims),
                        "relation_residuals": list(rel.residuals),
                        "f_residual": struct.f_residual,
                        "anticommutator_residuals": list(struct.anticommutator_residuals),
                        "passed": rel.passed and struct.passed})
    agg = _base_aggregate(cfg, "verify-appendix")
    agg.update({"trials": cfg.trials, "failures": failures,
                "max_residual": max(max(r["relation_residuals"] + [r["f_residual"]]
                                        + r["anticommutator_residuals"]) for r in records),
                "invariant_violation": "canonical instance failed" if failures else None})
    return records + [agg], EXIT_INVARIANT if failures else EXIT_OK


def cmd_amplify(cfg: ExperimentConfig) -> tuple[list[dict], int]:
    x = BitString.from_str(cfg.hash_input)
    key = BitString.from_str(cfg.hash_key)
    n, t = len(x), cfg.hash_t
    need = amplify.seed_length(n, t, cfg.family)
    if len(key) < need:
        raise ConfigError("hash_key", f"needs at least {need} bits")
    if cfg.family == amplify.TOEPLITZ:
        s = amplify.toeplitz_hash(x, amplify.ToeplitzSeed(key[:need], n, t))
    else:
        s = amplify.compact_toeplitz_hash(x, key, t)
    record = {"kind": "trial", "family": cfg.family, "input": str(x), "t": t, "output": str(s),
              "seed_bits_used": need}
    agg = _base_aggregate(cfg, "amplify")
    agg["leftover_bound_full_entropy"] = amplify.theorem1_bound(float(n), t, cfg.epsilon)
    agg["invariant_violation"] = None
    return [record, agg], EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privex", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value file; flags override it")
    parser.add_argument("--out", help="write JSON lines here instead of stdout")
    parser.add_argument("--strategy", choices=STRATEGIES)
    parser.add_argument("--k", type=int)
    parser.add_argument("--input-bits", dest="input_bits", type=int)
    parser.add_argument("--zeta", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--gamma", help="heuristic, zero, or an integer")
    parser.add_argument("--mode", choices=("abort", "tally"))
    parser.add_argument("--include-x1", dest="include_x1", choices=("true", "false"))
    parser.add_argument("--trusted", choices=("true", "false"))
    parser.add_argument("--trials", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--stages", type=int)
    parser.add_argument("--targets", help="comma-separated 0-based round indices (abort-leak)")
    parser.add_argument("--leak-mode", dest="leak_mode", choices=(ONLY_ALL_P, EXCEPT_ALL_P))
    parser.add_argument("--hash-t", dest="hash_t", type=int)
    parser.add_argument("--hash-input", dest="hash_input")
    parser.add_argument("--hash-key", dest="hash_key")
    parser.add_argument("--family", choices=amplify.FAMILIES)
    parser.add_argument("--workers", type=int)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _coerce(name, flag)
    return ExperimentConfig(**values)


def dumps(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def execute(cfg: ExperimentConfig, command: str) -> tuple[list[dict], int]:
    validate(cfg, command)
    if command in ("run", "mc"):
        if command == "run":
            cfg = dataclasses.replace(cfg, trials=1)
        return cmd_trials(cfg, command)
    if command == "iterate":
        return cmd_iterate(cfg)
    if command == "attack":
        return cmd_attack(cfg)
    if command == "oracle":
        return cmd_oracle(cfg)
    if command == "verify-appendix":
        return cmd_verify_appendix(cfg)
    return cmd_amplify(cfg)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        records, code = execute(cfg, args.command)
    except ConfigError as exc:
        print(json.dumps({"kind": "error", "field": exc.field, "message": exc.message}),
              file=sys.stderr)
        return EXIT_CONFIG
    text = dumps(records)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
