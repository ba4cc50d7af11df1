"""Command-line entry point: fit, race, train, eval and oracle.

Exit codes: 0 success, 1 usage error, 2 input or parse error, 3 runtime failure.
Every command writes only below its ``--out`` location and leaves a
``manifest.json`` describing how the outputs were produced.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import PROFILES, load_config, parse_config_text
from .engine import REFUEL_OPTIONS, event_log_csv, lap_chart_csv, run_race, standings_json
from .env import N_ACTIONS, OBS_BASELINE, OBS_DQN, RaceEnv

log = logging.getLogger("nlsrace")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


class InputError(Exception):
    """Bad input file or configuration; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


def _manifest(args, command: str, out: Path, name: str = "manifest.json", outputs=()) -> None:
    configs = {k: str(getattr(args, k)) for k in ("track", "params", "config", "data", "ckpt")
               if getattr(args, k, None) is not None}
    doc = {
        "command": command,
        "argv": list(args.argv),
        "config_paths": configs,
        "profile": getattr(args, "profile", None),
        "seed": getattr(args, "seed", None),
        "output_dir": str(out),
        "outputs": sorted(str(o) for o in outputs),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "tool_version": __version__,
    }
    _write(out, name, json.dumps(doc, indent=2) + "\n")


def _read_text(path) -> str:
    p = Path(path)
    try:
        return p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"{p}: no such file") from None
    except (IsADirectoryError, PermissionError, UnicodeDecodeError) as exc:
        raise InputError(f"{p}: cannot read ({exc})") from None


def _race_config(args):
    """Track/race config with optional fitted parameters substituted."""
    from .fitting import FittedParams

    if args.track is not None:
        _read_text(args.track)
    try:
        cfg = load_config(args.track, profile=args.profile)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if getattr(args, "params", None) is not None:
        try:
            cfg = FittedParams.from_json(_read_text(args.params)).apply(cfg)
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{args.params}: invalid parameter file ({exc})") from None
    return cfg


def _load_checkpoint(path):
    from .agents import DQNAgent, QLearningAgent

    text = _read_text(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
    kind = doc.get("agent") if isinstance(doc, dict) else None
    try:
        if kind == "q":
            return QLearningAgent.from_dict(doc)
        if kind == "dqn":
            return DQNAgent.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed {kind} checkpoint ({exc})") from None
    raise InputError(f"{path}: not an agent checkpoint (missing 'agent': 'q' | 'dqn')")


def _checkpoint_env(agent, cfg, path) -> RaceEnv:
    """Environment matching the checkpoint's observation variant, or an InputError."""
    from .agents import QLearningAgent

    kind = agent.obs_kind_ or (OBS_BASELINE if isinstance(agent, QLearningAgent) else OBS_DQN)
    env = RaceEnv(cfg, kind)
    if isinstance(agent, QLearningAgent):
        table = agent.table_
        names = tuple(c.name for c in table.spec)
        expected = tuple(c.name for c in env.obs_spec)
        if names != expected or table.shape != type(table)(env.obs_spec, N_ACTIONS, table.n_bins).shape:
            raise InputError(f"{path}: checkpoint expects observation {names} with table shape "
                             f"{tuple(table.shape)}, which does not match this race configuration")
    else:
        n_in = agent.params_.weights[0].shape[0]
        if n_in != len(env.obs_spec) or agent.params_.weights[-1].shape[1] != N_ACTIONS:
            raise InputError(f"{path}: network input {n_in} does not match observation "
                             f"{tuple(c.name for c in env.obs_spec)}")
    return env


def parse_strategy(text: str, laps: int, source: str = "<strategy>") -> list:
    """Per-lap action list from a strategy file.

    Accepted forms: JSON ``{"actions": [...]}`` with one action per lap, or
    text lines ``lap,action`` (``#`` comments allowed) listing the stop laps.
    """
    stripped = text.strip()
    if stripped.startswith("{") or stripped.startswith("["):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise InputError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
        actions = doc.get("actions") if isinstance(doc, dict) else doc
        if not isinstance(actions, list):
            raise InputError(f"{source}: expected an 'actions' list")
        out = []
        for k, a in enumerate(actions, start=1):
            if not isinstance(a, int) or isinstance(a, bool) or not 0 <= a < N_ACTIONS:
                raise InputError(f"{source}: action {k} must be an integer in 0..{N_ACTIONS - 1}, got {a!r}")
            out.append(a)
        if len(out) > laps:
            raise InputError(f"{source}: {len(out)} actions for a {laps}-lap race")
        return out + [0] * (laps - len(out))
    actions = [0] * laps
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise InputError(f"{source}:{lineno}: expected 'lap,action', got {raw.strip()!r}")
        try:
            lap, action = int(parts[0]), int(parts[1])
        except ValueError:
            raise InputError(f"{source}:{lineno}: lap and action must be integers") from None
        if not 1 <= lap <= laps:
            raise InputError(f"{source}:{lineno}: lap {lap} outside 1..{laps}")
        if not 0 <= action < N_ACTIONS:
            raise InputError(f"{source}:{lineno}: action {action} outside 0..{N_ACTIONS - 1}")
        actions[lap - 1] = action
    return actions


def _train_config(args):
    from .agents import TrainConfig, preset

    cfg = preset(args.preset) if args.preset else (preset("qlearn") if args.agent == "q" else preset("desk"))
    if args.config is not None:
        source = str(args.config)
        try:
            flat = parse_config_text(_read_text(args.config), source)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        changes = {}
        for key, value in flat.items():
            name = key.split(".", 1)[1] if key.startswith("train.") else key
            changes[name] = list(value) if name == "hidden_layers" and isinstance(value, (list, tuple)) else value
        if "hidden_layers" in changes and not isinstance(changes["hidden_layers"], list):
            changes["hidden_layers"] = [changes["hidden_layers"]]
        try:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), **changes})
        except (TypeError, ValueError) as exc:
            raise InputError(f"{source}: {exc}") from None
    overrides = {k: getattr(args, k) for k in ("episodes", "seed", "learning_rate") if getattr(args, k) is not None}
    try:
        return cfg.replace(**overrides) if overrides else cfg
    except ValueError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------- commands

def cmd_fit(args) -> int:
    from .fitting import ParamFitter, parse_timing_csv

    out = Path(args.out)
    if out.suffix == ".json":
        out_dir, stem = out.parent, out.stem
    else:
        out_dir, stem = out, "params"
    if args.track is not None:
        _read_text(args.track)
    try:
        config = load_config(args.track, profile=args.profile)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not Path(args.data).is_file():
        raise InputError(f"{args.data}: no such file")
    ds = parse_timing_csv(args.data, class_filter=args.class_tag or None)
    fitter = ParamFitter(config=config).fit(ds)
    params_path = _write(out_dir, f"{stem}.json", fitter.params_.to_json())
    report_path = _write(out_dir, f"{stem}.report.txt", fitter.report())
    _manifest(args, "fit", out_dir, f"{stem}.manifest.json" if stem != "params" else "manifest.json",
              [params_path, report_path])
    print(f"wrote {params_path} ({len(ds)} records, {ds.skipped_class} skipped by class filter)")
    if fitter.params_.fallbacks:
        print("fallbacks: " + "; ".join(fitter.params_.fallbacks))
    return EXIT_OK


def cmd_race(args) -> int:
    from .agents import strategy_oracle

    cfg = _race_config(args)
    out = Path(args.out)
    if args.strategy == "oracle":
        # stochastic races replay the plan that is optimal for the same track without noise
        plan_cfg = cfg if cfg.is_deterministic else load_config(args.track, profile="deterministic")
        try:
            actions, _ = strategy_oracle(plan_cfg)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        state = run_race(cfg, seed=args.seed, agent_actions=actions)
    elif args.strategy == "none":
        state = run_race(cfg, seed=args.seed, agent_actions=[0] * cfg.laps)
    else:
        text = _read_text(args.strategy)
        head = text.lstrip()[:200]
        if head.startswith("{") and '"agent"' in text[:4096] and ('"table"' in text or '"network"' in text):
            agent = _load_checkpoint(args.strategy)
            env = _checkpoint_env(agent, cfg, args.strategy)
            obs = env.reset(seed=args.seed)
            done = False
            while not done:
                res = env.step(agent(obs))
                obs, done = res.observation, res.done
            state = env.state
        else:
            actions = parse_strategy(text, cfg.laps, str(args.strategy))
            state = run_race(cfg, seed=args.seed, agent_actions=actions)
    outputs = [
        _write(out, "standings.json", standings_json(state)),
        _write(out, "events.csv", event_log_csv(state)),
        _write(out, "lap_chart.csv", lap_chart_csv(state)),
    ]
    _manifest(args, "race", out, outputs=outputs)
    car = state.agent
    print(f"agent finished P{state.position_of(0)}" + (" (retired)" if car.cond.retired else "")
          + f" in {car.cumulative_time:.3f} s; outputs in {out}")
    return EXIT_OK


def _summary_of(stats) -> dict:
    d = stats.summary()
    d["stop_laps"] = {}
    for r in stats.races:
        key = "-".join(str(x) for x in r.stop_laps) or "none"
        d["stop_laps"][key] = d["stop_laps"].get(key, 0) + 1
    return d


def cmd_train(args) -> int:
    from .agents import DQNAgent, QLearningAgent, evaluate

    cfg = _race_config(args)
    tcfg = _train_config(args)
    out = Path(args.out)
    kind = OBS_BASELINE if args.agent == "q" else OBS_DQN
    env = RaceEnv(cfg, kind)
    agent_cls = QLearningAgent if args.agent == "q" else DQNAgent
    agent = agent_cls.from_config(tcfg)

    def progress(_, episode, history):
        if episode % max(tcfg.eval_interval, 1) == 0:
            log.info("episode %d: last reward %.3f, position %d", episode, history.total_reward[-1],
                     history.final_position[-1])

    agent.fit(env, callback=progress)
    stats = evaluate(agent, functools.partial(RaceEnv, cfg, kind), args.eval_races, seed=args.eval_seed)
    summary = {"agent": args.agent, "train_config": tcfg.to_dict(), "episodes": tcfg.episodes,
               "evaluation": {"seed": args.eval_seed, **_summary_of(stats)}}
    outputs = [
        _write(out, "checkpoint.json", json.dumps(agent.to_dict()) + "\n"),
        _write(out, "metrics.csv", agent.history_.to_csv()),
        _write(out, "loss.csv", "episode,mean_loss\n" + "".join(
            f"{e},{loss:.8g}\n" for e, loss in agent.history_.loss_every(tcfg.loss_log_every))),
        _write(out, "summary.json", json.dumps(summary, indent=2) + "\n"),
    ]
    _manifest(args, "train", out, outputs=outputs)
    print(f"trained {args.agent} for {tcfg.episodes} episodes; greedy eval over {stats.n_races} races: "
          f"win rate {stats.win_rate:.2f}, mean finish {stats.mean_final_position:.2f}, "
          f"retirements {stats.retirement_rate:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .agents import evaluate

    cfg = _race_config(args)
    agent = _load_checkpoint(args.ckpt)
    env = _checkpoint_env(agent, cfg, args.ckpt)
    stats = evaluate(agent, functools.partial(RaceEnv, cfg, env.obs_kind), args.races, seed=args.seed,
                     jobs=args.jobs)
    summary = _summary_of(stats)
    text = json.dumps(summary, indent=2) + "\n"
    if args.out is not None:
        out = Path(args.out)
        outputs = [_write(out, "eval.json", text)]
        rows = ["seed,final_position,retired,race_time_s,total_reward,stop_laps"]
        rows += [f"{r.seed},{r.final_position},{int(r.retired)},{r.race_time:.6f},{r.total_reward:.6f},"
                 f"{'-'.join(map(str, r.stop_laps))}" for r in stats.races]
        outputs.append(_write(out, "races.csv", "\n".join(rows) + "\n"))
        _manifest(args, "eval", out, outputs=outputs)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .agents import stop_laps, strategy_oracle

    cfg = _race_config(args)
    try:
        actions, total = strategy_oracle(cfg, prune=not args.no_prune)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    doc = {"actions": actions, "stop_laps": list(stop_laps(actions)),
           "refuel_laps": [REFUEL_OPTIONS[a - 1] for a in actions if a], "race_time_s": round(total, 6),
           "deterministic_config": cfg.is_deterministic}
    out = Path(args.out)
    path = _write(out, "oracle.json", json.dumps(doc, indent=2) + "\n")
    _manifest(args, "oracle", out, outputs=[path])
    print(f"stops at laps {doc['stop_laps']} ({total:.3f} s); wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nlsrace", description="Endurance-race strategy simulator, learners and fitting tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def race_opts(sp, seed=True):
        sp.add_argument("--track", type=Path, help="race/track config file layered over the profile")
        sp.add_argument("--profile", choices=PROFILES, default="default", help="built-in base profile")
        sp.add_argument("--params", type=Path, help="fitted parameter JSON to substitute")
        if seed:
            sp.add_argument("--seed", type=int, default=7, help="race seed (default 7)")

    f = sub.add_parser("fit", help="fit stochastic parameters from timing data")
    f.add_argument("--data", type=Path, required=True, help="timing CSV")
    f.add_argument("--class", dest="class_tag", default="SP9", help="class filter (default SP9; '' keeps all)")
    f.add_argument("--out", type=Path, required=True, help="output directory or params .json path")
    f.add_argument("--track", type=Path, help="track config supplying sector geometry and defaults")
    f.add_argument("--profile", choices=PROFILES, default="default")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("race", help="run one race and export standings, events and a lap chart")
    race_opts(r)
    r.add_argument("--strategy", default="none",
                   help="'oracle', 'none', a strategy file (lap,action lines or JSON actions) "
                        "or an agent checkpoint")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.set_defaults(func=cmd_race)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--agent", choices=("q", "dqn"), required=True)
    t.add_argument("--preset", choices=("paper-v1", "paper-v2", "paper-v3", "desk", "smoke", "qlearn"))
    t.add_argument("--config", type=Path, help="training config file (train.key = value)")
    t.add_argument("--episodes", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--track", type=Path)
    t.add_argument("--profile", choices=PROFILES, default="reduced")
    t.add_argument("--params", type=Path)
    t.add_argument("--eval-races", type=int, default=50)
    t.add_argument("--eval-seed", type=int, default=10_000)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint greedily over seeded races")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--races", type=int, default=100)
    e.add_argument("--seed", type=int, default=10_000, help="first race seed")
    e.add_argument("--jobs", type=int, default=1, help="worker processes")
    e.add_argument("--track", type=Path)
    e.add_argument("--profile", choices=PROFILES, default="reduced")
    e.add_argument("--params", type=Path)
    e.add_argument("--out", type=Path, help="directory for eval.json and races.csv")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exhaustive best pit strategy for a race config")
    race_opts(o, seed=False)
    o.set_defaults(profile="deterministic")
    o.add_argument("--no-prune", action="store_true", help="disable bound pruning")
    o.add_argument("--out", type=Path, required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("races", "jobs", "eval_races", "episodes"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            parser.print_usage(sys.stderr)
            sys.stderr.write(f"nlsrace: error: --{name.replace('_', '-')} must be >= 1\n")
            return EXIT_USAGE
    from .fitting import InsufficientDataError, TimingParseError

    try:
        return args.func(args)
    except (InputError, TimingParseError) as exc:
        sys.stderr.write(f"nlsrace: error: {exc}\n")
        return EXIT_INPUT
    except InsufficientDataError as exc:
        sys.stderr.write(f"nlsrace: error: {exc}\n")
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"nlsrace: runtime failure: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
