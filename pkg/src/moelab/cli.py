"""Experiment runner: config files, extraction corpora, sweeps, reports.

Subcommands: demo-tie, oracle, leak, sweep, paths. Outputs are deterministic
given the config (JSON reports with sorted keys, CSV grids with fixed float
formatting), so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attack import AttackParams, AttackSession, leakage_attack, oracle_attack
from .batch import LocalModel, QueryLedger, TargetModel
from .errors import ConfigurationError, InvalidInputError
from .model import GUESS_ALPHABET, ModelConfig, ToyMoEModel, encode_text
from .numerics import QuantizationPolicy, QuantizationSite, TieMode
from .router import CapacityParams, QueryOrder, RouterConfig, decide_buffer_outcome

__all__ = ["RunConfig", "Report", "load_config", "run", "sweep", "demo_tie", "main"]


@dataclass
class RunConfig:
    """Flat experiment configuration; field names follow the notation table."""

    seed: int = 7
    depth: int = 2
    experts: int = 8
    hidden_dim: int = 32
    vocab_size: int = 64
    gate_logit_scale: float = 10.0
    dense_control: bool = False

    batch_size: int = 32
    gamma: float = 1.0
    tie_mode: str = "stable-ascending"
    quant_decimals: int = 5
    quant_site: str = "router-probabilities"
    batch_isolation: bool = False

    padding_lengths: tuple[int, ...] = (20, 24, 30, 40, 50, 60)
    phi: float = 0.85
    beta: int = 4
    epsilon: float = 1e-4
    blocker_max_attempts: int = 10_000
    min_signal_priority: float = 0.001
    max_experts_per_guess: int = 3

    secret: str = ""
    secret_count: int = 50
    secret_len_min: int = 3
    secret_len_max: int = 5
    out_dir: str = "out"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            experts=self.experts,
            hidden_dim=self.hidden_dim,
            vocab_size=self.vocab_size,
            seed=self.seed,
            gate_logit_scale=self.gate_logit_scale,
            dense_control=self.dense_control,
        )

    def router_config(self) -> RouterConfig:
        return RouterConfig(
            capacity=CapacityParams(
                batch_size=self.batch_size,
                max_seq_len=max(self.padding_lengths),
                capacity_factor=self.gamma,
                experts=self.experts,
            ),
            tie_mode=TieMode(self.tie_mode),
            quantization=QuantizationPolicy(
                decimals=self.quant_decimals, site=QuantizationSite(self.quant_site)
            ),
            batch_isolation=self.batch_isolation,
        )

    def attack_params(self) -> AttackParams:
        return AttackParams(
            batch_size=self.batch_size,
            paddings=tuple(self.padding_lengths),
            phi=self.phi,
            beta=self.beta,
            epsilon=self.epsilon,
            blocker_max_attempts=self.blocker_max_attempts,
            min_signal_priority=self.min_signal_priority,
            max_experts_per_guess=self.max_experts_per_guess,
            seed=self.seed,
        )

    def secrets(self) -> list[str]:
        """Seeded random corpus over the guess alphabet, or the pinned secret."""
        if self.secret:
            return [self.secret]
        rng = np.random.default_rng(self.seed + 1000)
        out = []
        for _ in range(self.secret_count):
            n = int(rng.integers(self.secret_len_min, self.secret_len_max + 1))
            out.append("".join(rng.choice(list(GUESS_ALPHABET), size=n)))
        return out


_BOOL_KEYS = {"batch_isolation", "dense_control"}
_INT_KEYS = {
    "seed", "depth", "experts", "hidden_dim", "vocab_size", "batch_size",
    "quant_decimals", "beta", "blocker_max_attempts", "max_experts_per_guess",
    "secret_count", "secret_len_min", "secret_len_max",
}
_FLOAT_KEYS = {"gate_logit_scale", "gamma", "phi", "epsilon", "min_signal_priority"}


def load_config(path: Optional[str]) -> RunConfig:
    """Parse a flat ``key = value`` config file; unknown keys are fatal."""
    cfg = RunConfig()
    if path is None:
        return cfg
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"unknown config key: {key}")
        if key == "padding_lengths":
            setattr(cfg, key, tuple(int(v) for v in value.split(",") if v.strip()))
        elif key in _BOOL_KEYS:
            setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
        elif key in _INT_KEYS:
            setattr(cfg, key, int(value))
        elif key in _FLOAT_KEYS:
            setattr(cfg, key, float(value))
        else:
            setattr(cfg, key, value)
    return cfg


# -- demo-tie ----------------------------------------------------------------

_TIE_ROWS = [
    # (p_guess, p_target, victim position label, order, expected target fate)
    (0.9, 0.7, "First", QueryOrder.VICTIM_FIRST, False),
    (0.9, 0.7, "Second", QueryOrder.PROBE_FIRST, False),
    (0.7, 0.9, "First", QueryOrder.VICTIM_FIRST, True),
    (0.7, 0.9, "Second", QueryOrder.PROBE_FIRST, True),
    (0.8, 0.8, "First", QueryOrder.VICTIM_FIRST, False),
    (0.8, 0.8, "Second", QueryOrder.PROBE_FIRST, True),
]


def demo_tie(config: RunConfig, out=None) -> int:
    """Reproduce the six-row tie-handling truth table on the live router.

    Returns the number of mismatching rows (0 on success). Printed order
    column is the victim token's batch position.
    """
    if out is None:
        out = sys.stdout
    if config.dense_control:
        print("dense control: single full-capacity expert, no drop possible", file=out)
        return 0
    mode = TieMode(config.tie_mode)
    if mode is TieMode.RANDOMIZED:
        print("randomized tie-breaking active: equal-priority rows are", file=out)
        print("nondeterministic; the two tie rows carry no stable outcome", file=out)
        return 0
    mismatches = 0
    header = f"{'Prioritization':<22}{'Order in batch':<16}{'Target token':<14}live"
    print(header, file=out)
    boundary = 4  # saturated slots ahead of the contested one
    for p_guess, p_target, label, order, expected in _TIE_ROWS:
        rel = ">" if p_guess > p_target else ("<" if p_guess < p_target else "=")
        got = decide_buffer_outcome(p_guess, p_target, order, boundary)
        fate = "Drops" if got else "Doesn't drop"
        ok = "ok" if got == expected else "MISMATCH"
        mismatches += got != expected
        print(
            f"{'P_guess ' + rel + ' P_target':<22}{label:<16}{fate:<14}{ok}",
            file=out,
        )
    return mismatches


# -- experiment runs ---------------------------------------------------------


@dataclass
class MessageOutcome:
    secret: str
    recovered: str
    success: bool
    tokens_total: int
    tokens_recovered: int
    per_token: list[dict] = field(default_factory=list)


@dataclass
class Report:
    """Aggregated extraction results plus plot-ready tallies."""

    messages: list[MessageOutcome]
    defense_flags: dict
    token_recovery_rate: float
    message_recovery_rate: float
    target_queries: int
    local_queries: int
    progress_log: str = ""  # JSON lines, one record per attempt/verification

    def padding_grid(self) -> dict[str, int]:
        """Recovered-token counts keyed by 'padding,message_length'."""
        grid: dict[str, int] = {}
        for m in self.messages:
            for t in m.per_token:
                key = f"{t['padding']},{m.tokens_total}"
                grid[key] = grid.get(key, 0) + 1
        return grid

    def to_dict(self) -> dict:
        return {
            "messages": [dataclasses.asdict(m) for m in self.messages],
            "defense_flags": self.defense_flags,
            "token_recovery_rate": self.token_recovery_rate,
            "message_recovery_rate": self.message_recovery_rate,
            "target_queries": self.target_queries,
            "local_queries": self.local_queries,
            "padding_grid": self.padding_grid(),
        }


def _attack_corpus(config: RunConfig, secrets: Sequence[str],
                   params: Optional[AttackParams] = None) -> Report:
    model = ToyMoEModel(config.model_config())
    base_router = config.router_config()
    local = LocalModel(model, base_router)
    params = params or config.attack_params()
    session = AttackSession(local, params)
    messages = []
    target_total = 0
    progress_lines: list[str] = []
    for idx, text in enumerate(secrets):
        secret = encode_text(text)[1:]
        ledger = QueryLedger()
        target = TargetModel(
            model, base_router, secret, ledger=ledger, tie_seed=config.seed + idx
        )
        result = leakage_attack(
            target, local, params, secret_len=len(secret), session=session
        )
        correct = sum(a == b for a, b in zip(result.recovered, secret))
        messages.append(
            MessageOutcome(
                secret=text,
                recovered=result.text,
                success=result.success and result.recovered == secret,
                tokens_total=len(secret),
                tokens_recovered=correct,
                per_token=[dataclasses.asdict(t) for t in result.per_token],
            )
        )
        target_total += ledger.target_queries
        attempts = ledger.to_json_lines()
        if attempts:
            progress_lines.append(attempts)
    verifications = local.ledger.to_json_lines()
    if verifications:
        progress_lines.append(verifications)
    tokens_total = sum(m.tokens_total for m in messages)
    tokens_rec = sum(m.tokens_recovered for m in messages)
    progress = "\n".join(progress_lines)
    return Report(
        messages=messages,
        defense_flags={
            "tie_mode": config.tie_mode,
            "batch_isolation": config.batch_isolation,
            "dense_control": config.dense_control,
        },
        token_recovery_rate=tokens_rec / tokens_total if tokens_total else 0.0,
        message_recovery_rate=(
            sum(m.success for m in messages) / len(messages) if messages else 0.0
        ),
        target_queries=target_total,
        local_queries=local.ledger.local_queries,
        progress_log=progress,
    )


def run(config: RunConfig, out_dir: Optional[Path] = None) -> Report:
    """Full corpus extraction; writes report.json, plot CSVs and the
    per-verification progress log."""
    report = _attack_corpus(config, config.secrets())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
        )
        _write_heatmap_csv(report, out_dir / "expert_index_heatmap.csv")
        _write_queries_csv(report, out_dir / "query_counts.csv")
        (out_dir / "attack_progress.jsonl").write_text(report.progress_log + "\n")
    return report


def _write_heatmap_csv(report: Report, path: Path) -> None:
    counts: dict[tuple[int, int], int] = {}
    for m in report.messages:
        for t in m.per_token:
            key = (int(t["expert"]), int(t["index"]))
            counts[key] = counts.get(key, 0) + 1
    lines = ["expert,token_index,successes"]
    for (expert, index) in sorted(counts):
        lines.append(f"{expert},{index},{counts[(expert, index)]}")
    path.write_text("\n".join(lines) + "\n")


def _write_queries_csv(report: Report, path: Path) -> None:
    lines = ["message,token_index,target_queries,local_queries"]
    for i, m in enumerate(report.messages):
        for t in m.per_token:
            lines.append(
                f"{i},{t['index']},{t['target_queries']},{t['local_queries']}"
            )
    path.write_text("\n".join(lines) + "\n")


def sweep(config: RunConfig, axis: str, out_dir: Optional[Path] = None) -> list[dict]:
    """Grid run over padding lengths or target experts.

    Rows: (axis value, message length, success rate, mean target queries).
    Success need not be monotone in padding length; the trade-off is the
    phenomenon under study.
    """
    if axis not in ("padding", "expert"):
        raise InvalidInputError(f"unknown sweep axis: {axis}")
    secrets = config.secrets()
    rows = []
    values: Sequence[int]
    if axis == "padding":
        values = config.padding_lengths
    else:
        values = range(config.experts)
    for value in values:
        params = config.attack_params()
        if axis == "padding":
            params = dataclasses.replace(params, paddings=(int(value),))
        else:
            params = dataclasses.replace(
                params, experts_order=(int(value),), max_experts_per_guess=1
            )
        report = _attack_corpus(config, secrets, params=params)
        by_len: dict[int, list[MessageOutcome]] = {}
        for m in report.messages:
            by_len.setdefault(m.tokens_total, []).append(m)
        for length in sorted(by_len):
            group = by_len[length]
            tokens = sum(m.tokens_total for m in group)
            rec = sum(m.tokens_recovered for m in group)
            queries = [
                t["target_queries"] for m in group for t in m.per_token
            ]
            mean_q = sum(queries) / len(queries) if queries else 0.0
            rows.append(
                {
                    "axis": axis,
                    "value": int(value),
                    "message_length": length,
                    "success_rate": rec / tokens if tokens else 0.0,
                    "mean_target_queries": mean_q,
                }
            )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"{axis},message_length,success_rate,mean_target_queries"]
        for r in rows:
            lines.append(
                f"{r['value']},{r['message_length']},"
                f"{r['success_rate']:.6f},{r['mean_target_queries']:.2f}"
            )
        (out_dir / f"sweep_{axis}.csv").write_text("\n".join(lines) + "\n")
    return rows


def _path_counts(config: RunConfig, beta: int) -> dict:
    bits = config.experts * config.depth
    ball = sum(comb(bits, i) for i in range(min(beta, bits) + 1))
    return {
        "path_bits": bits,
        "beta": beta,
        "ball_size": ball,
        "full_enumeration": 2 ** bits,
    }


# -- CLI ----------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Expert-choice routing tie-break leakage laboratory",
    )
    parser.add_argument("--config", help="path to a flat key = value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (default from config)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("demo-tie", help="reproduce the tie-handling truth table")
    p_oracle = sub.add_parser("oracle", help="two-query candidate verification")
    p_oracle.add_argument("--candidate", required=True, help="candidate message text")
    sub.add_parser("leak", help="extract the configured secret corpus")
    p_sweep = sub.add_parser("sweep", help="grid run over an axis")
    p_sweep.add_argument("--axis", choices=["padding", "expert"], required=True)
    p_paths = sub.add_parser("paths", help="path-table size diagnostics")
    p_paths.add_argument("--beta", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
    except (ConfigurationError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    out_dir = Path(config.out_dir)

    if args.command == "demo-tie":
        mismatches = demo_tie(config)
        return 1 if mismatches else 0

    if args.command == "paths":
        beta = args.beta if args.beta is not None else config.beta
        info = _path_counts(config, beta)
        print(json.dumps(info, sort_keys=True))
        return 0

    if args.command == "oracle":
        try:
            candidate = encode_text(args.candidate)[1:]
        except InvalidInputError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        secret_text = config.secret or args.candidate
        model = ToyMoEModel(config.model_config())
        base_router = config.router_config()
        local = LocalModel(model, base_router)
        target = TargetModel(
            model, base_router, encode_text(secret_text)[1:], tie_seed=config.seed
        )
        accepted = oracle_attack(candidate, target, local, config.attack_params())
        print(
            json.dumps(
                {
                    "candidate": args.candidate,
                    "accepted": bool(accepted),
                    "target_queries": target.ledger.target_queries,
                },
                sort_keys=True,
            )
        )
        return 0

    if args.command == "leak":
        report = run(config, out_dir=out_dir)
        print(
            json.dumps(
                {
                    "token_recovery_rate": report.token_recovery_rate,
                    "message_recovery_rate": report.message_recovery_rate,
                    "target_queries": report.target_queries,
                    "out_dir": str(out_dir),
                },
                sort_keys=True,
            )
        )
        return 0

    if args.command == "sweep":
        rows = sweep(config, args.axis, out_dir=out_dir)
        print(json.dumps({"rows": len(rows), "out_dir": str(out_dir)}, sort_keys=True))
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
