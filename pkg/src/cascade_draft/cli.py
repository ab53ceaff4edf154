"""``cascade-draft`` command line: build and train models, generate, check, benchmark.

Every command reads a ``--config`` file (see :mod:`cascade_draft.config`);
the flags below override single entries. Logging goes to stderr at the
level named by ``FEGL_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, RunConfig
from .corpus import SuccessorLanguage, read_prompt_file, synthetic_prompts
from .drafter import CascadeDrafter
from .engine import MODES, GenerationConfig, cycle_records, generate, summarize, write_jsonl
from .lossless import run_suite
from .numerics import ParameterError
from .serialization import FormatError
from .target_model import TargetModel
from .training import (TrainingError, generate_training_data, held_out_ce, load_dataset, pretrain_target,
                       save_dataset, train_drafter)

log = logging.getLogger("cascade_draft")

BENCH_MODES = ("vanilla", "cascade_tree", "cascade_chain", "parallel_heads")


class CommandError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("FEGL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"FEGL_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _load_target(cfg: RunConfig) -> TargetModel:
    path = cfg.paths.target
    if not os.path.exists(path):
        raise CommandError(f"target weights not found: {path} (run init-target first)")
    return TargetModel.load_weights(path, cfg.model).freeze()


def _load_drafter(cfg: RunConfig, target: TargetModel, required: bool = True) -> CascadeDrafter:
    path = cfg.paths.drafter
    if not os.path.exists(path):
        if required:
            raise CommandError(f"drafter weights not found: {path} (run train-drafter first)")
        log.info("no drafter at %s; using an untrained drafter (seed %d)", path, cfg.seed)
        return CascadeDrafter.init(cfg.drafter, target, cfg.seed)
    return CascadeDrafter.load_weights(path, cfg.drafter, target)


def _eval_prompts(cfg: RunConfig) -> list[list[int]]:
    if cfg.paths.prompts:
        prompts = read_prompt_file(cfg.paths.prompts)
        if not prompts:
            raise CommandError(f"no prompts in {cfg.paths.prompts}")
        bad = [t for p in prompts for t in p if not 0 <= t < cfg.model.vocab_size]
        if bad:
            raise CommandError(f"prompt token {bad[0]} outside vocabulary of {cfg.model.vocab_size}")
        return prompts
    return synthetic_prompts(cfg.model.vocab_size, cfg.eval.n_prompts, cfg.eval.prompt_len,
                             seed=cfg.eval.prompt_seed, language_seed=cfg.pretrain.language_seed)


def _gen_config(cfg: RunConfig, mode: str, seed: int) -> GenerationConfig:
    return GenerationConfig(**{**cfg.gen.__dict__, "mode": mode, "seed": seed})


def _out_path(args, default: str) -> str:
    return args.out or default


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_init_target(cfg: RunConfig, out_path: str) -> int:
    target = TargetModel.init(cfg.model, cfg.seed)
    if cfg.pretrain.steps > 0:
        lang = SuccessorLanguage(cfg.model.vocab_size, cfg.pretrain.language_seed)
        before = held_out_ce(target, lang, 64, cfg.pretrain.seq_len, seed=cfg.seed + 1)
        pretrain_target(target, lang, cfg.pretrain.steps, cfg.pretrain.batch_size, cfg.pretrain.seq_len,
                        cfg.pretrain.lr, seed=cfg.seed)
        after = held_out_ce(target, lang, 64, cfg.pretrain.seq_len, seed=cfg.seed + 1)
        print(f"held-out CE {before:.4f} -> {after:.4f}")
    target.save_weights(out_path)
    print(f"wrote target {out_path} sha256 {target.parameter_digest()}")
    return 0


def cmd_gen_data(cfg: RunConfig, out_path: str) -> int:
    target = _load_target(cfg)
    prompts = synthetic_prompts(cfg.model.vocab_size, cfg.data.n_prompts, cfg.data.prompt_len,
                                seed=cfg.seed, language_seed=cfg.pretrain.language_seed)
    examples, stats = generate_training_data(target, prompts, cfg.data.n_examples, cfg.data.continuation_len,
                                             cfg.drafter.depth, seed=cfg.seed, align=cfg.data.align)
    save_dataset(out_path, examples)
    print(f"wrote {stats.generated} examples to {out_path} (skipped {stats.skipped_short} short)")
    return 0


def cmd_train_drafter(cfg: RunConfig, target_path: str, data_path: str, out_path: str) -> int:
    cfg.check_compatible()
    cfg.paths.target = target_path
    target = _load_target(cfg)
    if os.path.exists(data_path):
        examples = load_dataset(data_path)
    else:
        log.info("no dataset at %s; generating one", data_path)
        cmd_gen_data(cfg, data_path)
        examples = load_dataset(data_path)
    drafter = CascadeDrafter.init(cfg.drafter, target, cfg.seed)
    history = train_drafter(drafter, examples, cfg.train)
    drafter.save_weights(out_path)
    csv_path = os.path.splitext(out_path)[0] + ".loss.csv"
    history.write_csv(csv_path, cfg.drafter.depth)
    if history.steps:
        print(f"loss {history.steps[0].loss:.4f} -> {history.steps[-1].loss:.4f} over {len(history.steps)} steps")
    print(f"wrote drafter {out_path} and loss curve {csv_path}")
    return 0


def cmd_generate(cfg: RunConfig) -> int:
    target = _load_target(cfg)
    mode = cfg.gen.mode
    drafter = None if mode == "vanilla" else _load_drafter(cfg, target)
    results = {}
    for i, prompt in enumerate(_eval_prompts(cfg)):
        res = generate(prompt, _gen_config(cfg, mode, cfg.gen.seed + i), target, drafter)
        results[i] = res
        print(" ".join(str(t) for t in res.tokens))
    s = summarize(mode, results, cfg.gen.draft_depth)
    print(f"# mode={mode} prompts={s.prompts} tokens={s.tokens} cycles={s.cycles} tau={s.tau:.4f} "
          f"target_calls={s.target_calls} drafter_calls={s.drafter_calls}")
    return 0


def cmd_verify_lossless(cfg: RunConfig, corrupt_acceptance: bool = False) -> int:
    target = _load_target(cfg)
    drafter = _load_drafter(cfg, target, required=False)
    prompts = synthetic_prompts(cfg.model.vocab_size, cfg.lossless.n_prompts, cfg.eval.prompt_len,
                                seed=cfg.seed, language_seed=cfg.pretrain.language_seed)
    results = run_suite(target, drafter, prompts, cfg.lossless.max_new_tokens, cfg.gen.draft_depth,
                        cfg.gen.topk, mc_trials=cfg.lossless.mc_trials, seed=cfg.seed,
                        always_accept=corrupt_acceptance)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(cfg: RunConfig, out_path: str) -> int:
    target = _load_target(cfg)
    drafter = _load_drafter(cfg, target, required=False)
    prompts = _eval_prompts(cfg)
    runs = {}
    with open(out_path, "w", encoding="utf-8") as fh:
        for mode in BENCH_MODES:
            runs[mode] = {i: generate(p, _gen_config(cfg, mode, cfg.gen.seed + i), target, drafter)
                          for i, p in enumerate(prompts)}
            for i, res in runs[mode].items():
                write_jsonl(fh, cycle_records(res, mode, i))
        summaries = [summarize(m, runs[m], cfg.gen.draft_depth, runs["vanilla"]) for m in BENCH_MODES]
        write_jsonl(fh, (s.record() for s in summaries))
    print(f"{'mode':<16}{'tau':>8}{'calls':>8}{'call_ratio':>12}{'wall_s':>10}{'speedup':>9}  acceptance by depth")
    for s in summaries:
        rates = " ".join("-" if r is None else f"{r:.2f}" for r in s.acceptance_by_depth)
        print(f"{s.mode:<16}{s.tau:>8.3f}{s.target_calls:>8d}{s.call_ratio:>12.3f}{s.wall_time:>10.2f}"
              f"{s.wall_speedup:>9.2f}  {rates}")
    print(f"wrote {out_path}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-draft",
                                     description="Speculative decoding with a cascaded single-pass drafter.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("init-target", "gen-data", "train-drafter", "generate", "verify-lossless", "bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value run configuration")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--out", help="output file (defaults come from the paths section)")
        p.add_argument("--mode", choices=MODES, help="generation mode")
        p.add_argument("--temperature", type=float)
        p.add_argument("--depth", type=int, help="draft depth used at generation time")
        p.add_argument("--topk", type=int, help="candidates per tree level")
        if name == "generate":
            p.add_argument("--prompts", help="prompt file, one line of token ids per prompt")
        if name == "verify-lossless":
            p.add_argument("--corrupt-acceptance", action="store_true", help=argparse.SUPPRESS)
    return parser


def _overrides(args) -> dict:
    out = {}
    for flag, key in (("seed", "seed"), ("mode", "gen.mode"), ("temperature", "gen.temperature"),
                      ("depth", "gen.draft_depth"), ("topk", "gen.topk"), ("prompts", "paths.prompts")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = RunConfig.load(args.config, _overrides(args))
        log.info("resolved config:\n%s", cfg.dump())
        if args.command == "init-target":
            return cmd_init_target(cfg, _out_path(args, cfg.paths.target))
        if args.command == "gen-data":
            return cmd_gen_data(cfg, _out_path(args, cfg.paths.data))
        if args.command == "train-drafter":
            return cmd_train_drafter(cfg, cfg.paths.target, cfg.paths.data, _out_path(args, cfg.paths.drafter))
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "verify-lossless":
            return cmd_verify_lossless(cfg, args.corrupt_acceptance)
        return cmd_bench(cfg, _out_path(args, os.path.join(cfg.paths.out_dir, "metrics.jsonl")))
    except (CommandError, ConfigError, FormatError, ParameterError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
