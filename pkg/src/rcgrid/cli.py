"""Command-line surface binding the pipeline end to end."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from . import encoder as enc
from . import evalsuite, expert, finetune, policy
from . import reward as rw
from . import worldgrid as wg

COMMANDS = ("gen-demos", "pretrain-encoder", "finetune-encoder",
            "label-returns", "train-policy", "evaluate", "cycle", "curves",
            "ablate")


def _parser():
    p = argparse.ArgumentParser(
        prog="rcgrid",
        description="return-conditioned gridworld imitation pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", required=True, help="output artifact path")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--seed", type=int, default=None)

    def add(name, *flags):
        sp = sub.add_parser(name, parents=[common])
        for flag, kw in flags:
            sp.add_argument(flag, **kw)
        return sp

    add("gen-demos",
        ("--task", {}), ("--split", {}), ("--n", {"type": int, "dest": "n_demos"}))
    add("pretrain-encoder",
        ("--pairs", {"type": int, "dest": "pretrain_pairs"}),
        ("--epochs", {"type": int, "dest": "pretrain_epochs"}),
        ("--lr", {"type": float, "dest": "pretrain_lr"}))
    add("finetune-encoder",
        ("--encoder", {"required": True}), ("--demos", {"required": True}),
        ("--beta", {"type": float}), ("--epochs", {"type": int, "dest": "ft_epochs"}),
        ("--no-vip", {"action": "store_true"}),
        ("--no-idm", {"action": "store_true"}))
    add("label-returns",
        ("--encoder", {"required": True}), ("--demos", {"required": True}),
        ("--gamma", {"type": float}), ("--norm-constant", {"type": float,
                                                           "dest": "norm_constant"}))
    add("train-policy",
        ("--encoder", {"required": True}), ("--labeled", {"required": True}),
        ("--kind", {}), ("--lam", {"type": float}),
        ("--epochs", {"type": int, "dest": "policy_epochs"}),
        ("--augment", {"action": "store_true", "default": None}))
    add("evaluate",
        ("--encoder", {"required": True}), ("--policy", {"required": True}),
        ("--task", {}), ("--split", {}),
        ("--episodes", {"type": int}), ("--text", {}))
    add("cycle",
        ("--encoder", {"required": True}), ("--policy", {"required": True}),
        ("--task", {}), ("--split", {}), ("--levels", {"type": int,
                                                       "dest": "cycle_levels"}))
    add("curves",
        ("--encoder", {"required": True}), ("--demos", {"required": True}),
        ("--text", {}))
    add("ablate",
        ("--encoder", {"required": True}), ("--demos", {"required": True}),
        ("--grid", {}), ("--episodes", {"type": int}),
        ("--ft-epochs", {"type": int, "dest": "ft_epochs"}),
        ("--policy-epochs", {"type": int, "dest": "policy_epochs"}))
    return p


def _resolve(args):
    file_values = cfgmod.load_file(args.config) if args.config else None
    overrides = {k: v for k, v in vars(args).items()
                 if k in cfgmod.DEFAULTS and v is not None}
    cfg = cfgmod.resolve(file_values, overrides)
    if getattr(args, "no_vip", False):
        cfg["vip"] = False
    if getattr(args, "no_idm", False):
        cfg["idm"] = False
    return cfg


def _require_file(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _snapshot(out, cfg):
    cfgmod.save_snapshot(cfgmod.snapshot_for(out), cfg)


def _load_labeled_list(path):
    ds = rw.load_labeled(path)
    return ds.records, ds.meta


def dispatch(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _resolve(args)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        cfg_hash = cfgmod.config_hash(cfg)
        cmd = args.command

        if cmd == "gen-demos":
            ds = expert.generate_demos(cfg["task"], cfg["split"],
                                       cfg["n_demos"], cfg["seed"])
            ds.meta["config_hash"] = cfg_hash
            expert.save(ds, out)

        elif cmd == "pretrain-encoder":
            bundle = enc.EncoderBundle.new(cfg["seed"], alpha=cfg["alpha"])
            pairs = enc.build_caption_corpus(cfg["pretrain_pairs"], cfg["seed"])
            bundle, history = enc.pretrain_contrastive(
                bundle, pairs, epochs=cfg["pretrain_epochs"],
                temperature=cfg["temperature"], lr=cfg["pretrain_lr"],
                batch_size=cfg["pretrain_batch"], seed=cfg["seed"],
                log=_log)
            enc.save_bundle(bundle, out, extra={"stage": "pretrained",
                                                "history": history,
                                                "config_hash": cfg_hash})

        elif cmd == "finetune-encoder":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            demos = expert.load(_require_file(args.demos, "demo dataset"))
            beta = cfg["beta"] if cfg["idm"] else 0.0
            tuned, report = finetune.finetune(
                bundle, demos, beta=beta, use_vip=cfg["vip"],
                epochs=cfg["ft_epochs"], val_split=cfg["val_split"],
                gamma_ft=cfg["gamma_ft"], lr=cfg["ft_lr"],
                weight_decay=cfg["ft_weight_decay"],
                batch_size=cfg["ft_batch"], seed=cfg["seed"], log=_log)
            enc.save_bundle(tuned, out, extra={"stage": "finetuned",
                                               "config_hash": cfg_hash})
            report["config_hash"] = cfg_hash
            finetune.save_report(str(out) + ".report.json", report)

        elif cmd == "label-returns":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            demos = expert.load(_require_file(args.demos, "demo dataset"))
            labeled, _, meta = rw.label_returns(
                demos, bundle, gamma=cfg["gamma"], C=cfg["norm_constant"])
            meta["config_hash"] = cfg_hash
            rw.save_labeled(out, labeled, meta)

        elif cmd == "train-policy":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            labeled, _ = _load_labeled_list(
                _require_file(args.labeled, "labeled dataset"))
            model, report = policy.train_policy(
                cfg["kind"], labeled, bundle, lam=cfg["lam"],
                epochs=cfg["policy_epochs"], batch_size=cfg["policy_batch"],
                lr=cfg["policy_lr"], weight_decay=cfg["policy_weight_decay"],
                augment=cfg["augment"], seed=cfg["seed"],
                target_q=cfg["quantile"], log=_log)
            model.meta["config_hash"] = cfg_hash
            policy.save_policy(model, out)
            report["config_hash"] = cfg_hash
            finetune.save_report(str(out) + ".report.json", report)

        elif cmd == "evaluate":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            model = policy.load_policy(_require_file(args.policy, "policy"))
            report = evalsuite.evaluate(
                model, bundle, cfg["task"], cfg["split"], cfg["episodes"],
                cfg["seed"], threads=cfg["threads"],
                override_text=getattr(args, "text", None))
            payload = report.to_dict()
            payload["config_hash"] = cfg_hash
            evalsuite.save_report(out, payload)

        elif cmd == "cycle":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            model = policy.load_policy(_require_file(args.policy, "policy"))
            reports = evalsuite.cycle_suite(
                model, bundle, cfg["task"], cfg["split"],
                cfg["cycle_levels"], cfg["seed"], threads=cfg["threads"])
            payload = {"config_hash": cfg_hash,
                       "reports": [r.__dict__ for r in reports]}
            evalsuite.save_report(out, payload)

        elif cmd == "curves":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            demos = expert.load(_require_file(args.demos, "demo dataset"))
            text = getattr(args, "text", None)
            instr = wg.Instruction.from_text(text) if text else None
            evalsuite.export_reward_curves(bundle, demos, instruction=instr,
                                           path=out, gamma=cfg["gamma"],
                                           C=cfg["norm_constant"])

        elif cmd == "ablate":
            bundle, _ = enc.load_bundle(_require_file(args.encoder, "encoder"))
            demos = expert.load(_require_file(args.demos, "demo dataset"))
            grids = {"vip_idm": evalsuite.vip_idm_grid,
                     "lambda": evalsuite.lambda_sweep,
                     "return_pred": evalsuite.return_pred_toggle,
                     "text": evalsuite.text_control}
            if cfg["grid"] not in grids:
                raise cfgmod.ConfigError(
                    f"unknown grid {cfg['grid']!r}; choose from {sorted(grids)}")
            base = {"task": cfg["task"], "demos": demos,
                    "ft_epochs": cfg["ft_epochs"],
                    "policy_epochs": cfg["policy_epochs"],
                    "episodes": cfg["episodes"], "seed": cfg["seed"],
                    "batch_size": cfg["policy_batch"], "lam": cfg["lam"],
                    "beta": cfg["beta"], "threads": cfg["threads"],
                    "augment": cfg["augment"]}
            rows = evalsuite.run_ablation(grids[cfg["grid"]](), base, bundle,
                                          log=_log)
            for row in rows:
                row["config_hash"] = cfg_hash
            evalsuite.save_table(out, rows)

        _snapshot(out, cfg)
        return 0
    except (cfgmod.ConfigError, FileNotFoundError, ValueError,
            expert.DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _log(msg):
    print(msg, file=sys.stderr)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
