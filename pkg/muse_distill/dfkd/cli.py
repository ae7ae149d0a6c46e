# muse_distill/dfkd/cli.py

"""
Surface en ligne de commande :
  train, train-teacher, eval, derive-radii, mask-preview, dump-images, inspect-pool.

Codes de sortie : 0 succès, 2 erreur de validation / de format, 1 erreur inattendue.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from pydantic import ValidationError

from muse_distill.core.config import get_metrics_db_url, get_thread_override
from muse_distill.core.exceptions import ConfigError, MuseError, ShapeError
from muse_distill.core.logger import get_logger
from muse_distill.dfkd.checkpoint import load_checkpoint, save_checkpoint
from muse_distill.dfkd.datasets import default_handle, handle_from_config, load_dataset
from muse_distill.dfkd.losses import build_target_mask
from muse_distill.dfkd.models import derive_radii, load_embedding_table, min_pairwise_mse
from muse_distill.dfkd.pool import pool_load, pool_summary
from muse_distill.dfkd.report import format_mask_grid, write_pgm
from muse_distill.dfkd.schema import REQUIRED_KEYS, DatasetFormat, MaskKind, TrainConfig
from muse_distill.dfkd.trainer import dump_pool_images, evaluate, train, train_teacher

log = get_logger(__name__)


# ---------------- Fichier de configuration ----------------

def _scan_lines(text: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"ligne sans '=' : '{raw.strip()}'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("clé vide", line=number)
        if key in values:
            raise ConfigError(f"clé '{key}' déjà définie ligne {lines[key]}", key=key, line=number)
        values[key] = value
        lines[key] = number
    return values, lines


def parse_config_text(text: str) -> TrainConfig:
    """Texte clé = valeur -> TrainConfig ; les erreurs portent la clé et le numéro de ligne."""
    values, lines = _scan_lines(text)
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"clé obligatoire manquante : '{key}'", key=key)
    for key in values:
        if key not in TrainConfig.model_fields:
            raise ConfigError(f"clé inconnue : '{key}'", key=key, line=lines[key])
    try:
        return TrainConfig(**{k: (None if v == "" else v) for k, v in values.items()})
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first.get("loc") else None
        raise ConfigError(f"{key or 'config'} : {first['msg']}", key=key, line=lines.get(key)) from e


def load_config(path: str) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"lecture impossible de {path} ({e})") from e
    config = parse_config_text(text)
    threads = get_thread_override()
    if threads is not None and threads != config.threads:
        log.info("MUSE_THREADS=%d remplace threads=%d.", threads, config.threads)
        config = config.model_copy(update={"threads": threads})
    return config


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_render_value(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: TrainConfig) -> str:
    """Config résolue en texte ; parse_config_text(render_config(c)) == c."""
    lines = [
        f"# S résolu = max(1, round({config.iters_s} * {config.data_ratio})) = {config.resolved_iters_s}",
        f"# batch étudiant résolu = {config.resolved_student_batch_size}",
    ]
    for name in TrainConfig.model_fields:
        value = getattr(config, name)
        if value is None:
            continue
        lines.append(f"{name} = {_render_value(value)}")
    return "\n".join(lines) + "\n"


# ---------------- Commandes ----------------

def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.dry_run:
        print(render_config(config), end="")
        return 0
    if not config.teacher_checkpoint:
        raise ConfigError("teacher_checkpoint est requis pour 'train'", key="teacher_checkpoint")
    teacher, meta = load_checkpoint(config.teacher_checkpoint)
    handle = handle_from_config(config, "test")
    test_set = load_dataset(handle) if handle is not None else None
    if test_set is None:
        log.warning("Aucun jeu de test configuré : ni vérification du professeur ni évaluation.")
    result = train(config, teacher, test_set=test_set, teacher_meta=meta, resume=args.resume,
                   metrics_db=args.metrics_db or get_metrics_db_url())
    if result.final_top1 is not None:
        print(f"top1 {result.final_top1:.2f} top5 {result.final_top5:.2f}")
    return 0


def cmd_train_teacher(args) -> int:
    config = load_config(args.config)
    train_handle = handle_from_config(config, "train")
    if train_handle is None:
        raise ConfigError("train_images est requis pour 'train-teacher'", key="train_images")
    test_handle = handle_from_config(config, "test")
    train_set = load_dataset(train_handle)
    test_set = load_dataset(test_handle) if test_handle is not None else None
    model, top1 = train_teacher(config, train_set, test_set)
    out = args.out or config.teacher_checkpoint or str(Path(config.out_dir) / "teacher.ckpt")
    save_checkpoint(model, out, meta={"test_top1": top1, "seed": config.seed, "epochs": config.teacher_epochs})
    if top1 is not None:
        print(f"top1 {top1:.2f}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    fmt = DatasetFormat(args.format)
    handle = default_handle(fmt, "test", args.images, args.labels, num_classes=args.num_classes)
    if model.spec.num_classes != handle.num_classes:
        raise ShapeError(f"Modèle à {model.spec.num_classes} classes pour un dataset à K={handle.num_classes}.")
    data = load_dataset(handle)
    resolution = "native" if args.resolution == "native" else int(args.resolution)
    top1, top5 = evaluate(model, data.images, data.labels, resolution)
    print(f"top1 {top1:.2f} top5 {top5:.2f}")
    return 0


def cmd_derive_radii(args) -> int:
    table = load_embedding_table(args.embedding)
    d = min_pairwise_mse(table)
    r_i, r_o = derive_radii(d)
    print(f"min_dist {d:.6g} r_i {r_i:.6g} r_o {r_o:.6g}")
    return 0


def cmd_mask_preview(args) -> int:
    params = [float(p) for p in args.params.split(",") if p.strip()]
    mask = build_target_mask(MaskKind(args.kind), params, args.size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_name(out.name + ".txt").write_text(format_mask_grid(mask.values), encoding="utf-8")
    write_pgm(mask.values, out.with_name(out.name + ".pgm"))
    log.info("Masque %s%s %dx%d écrit : %s.{txt,pgm}", mask.kind.value, mask.params, *mask.size, out)
    return 0


def cmd_dump_images(args) -> int:
    pool = pool_load(args.pool)
    dump_pool_images(pool, args.count, args.out_dir, args.seed)
    return 0


def cmd_inspect_pool(args) -> int:
    summary = pool_summary(pool_load(args.pool, expected_base_resolution=args.base_resolution))
    print(f"base_resolution {summary['base_resolution']}")
    print(f"batches {summary['batches']} images {summary['images']}")
    print(f"spent_units {summary['spent_units']} ({float(summary['spent_units']):.4f}) "
          f"capacity_units {summary['capacity_units']} ({float(summary['capacity_units']):.4f})")
    print(f"exhausted {'yes' if summary['exhausted'] else 'no'}")
    for e, info in summary["resolutions"].items():
        print(f"e={e} images {info['images']} units {info['units']} "
              f"images_per_unit {info['images_per_unit']} labels {info['label_counts']}")
    return 0


# ---------------- Analyse des arguments ----------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muse", description="Distillation sans données multi-résolution.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Distillation complète à partir d'un fichier de config.")
    p.add_argument("config")
    p.add_argument("--dry-run", action="store_true", help="Affiche la config résolue et quitte.")
    p.add_argument("--resume", action="store_true", help="Reprend depuis out_dir/state.pt.")
    p.add_argument("--metrics-db", default=None, help="URL SQLAlchemy du registre des runs.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-teacher", help="Pré-entraînement supervisé du professeur.")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("eval", help="Top-1 / top-5 d'un checkpoint sur un jeu de test.")
    p.add_argument("checkpoint")
    p.add_argument("--format", choices=[f.value for f in DatasetFormat], default=DatasetFormat.IDX.value)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--resolution", default="native")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("derive-radii", help="Distance minimale de la table et rayons (r_i, r_o).")
    p.add_argument("embedding")
    p.set_defaults(func=cmd_derive_radii)

    p = sub.add_parser("mask-preview", help="Écrit un masque cible en grille texte et PGM.")
    p.add_argument("--kind", choices=[k.value for k in MaskKind], required=True)
    p.add_argument("--params", required=True, help="Paramètres séparés par des virgules.")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True, help="Chemin de base (suffixes .txt et .pgm ajoutés).")
    p.set_defaults(func=cmd_mask_preview)

    p = sub.add_parser("dump-images", help="Exporte des images du pool en PPM.")
    p.add_argument("pool")
    p.add_argument("count", type=int)
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dump_images)

    p = sub.add_parser("inspect-pool", help="Résumé d'un fichier de pool et équivalences de budget.")
    p.add_argument("pool")
    p.add_argument("--base-resolution", type=int, default=None)
    p.set_defaults(func=cmd_inspect_pool)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MuseError, ValueError, OSError) as e:
        print(f"erreur : {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.error("Erreur inattendue dans '%s' : %s", args.command, e, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
