# muse_distill/dfkd/trainer.py

"""
Orchestration de la distillation sans données : phases générateur / étudiant
alternées, calendriers de taux d'apprentissage, évaluation, reprise d'un run
et pré-entraînement supervisé du professeur.
"""

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import SGD, Adam, AdamW
from torch.optim.lr_scheduler import LambdaLR

from muse_distill.core.exceptions import NonFiniteError, ShapeError, TrainingAbortedError
from muse_distill.core.logger import attach_run_log, detach_run_log, get_logger
from muse_distill.core.utils import derive_seed, parameter_digest, seed_everything, torch_generator
from muse_distill.dfkd.checkpoint import save_checkpoint
from muse_distill.dfkd.datasets import LabeledImages
from muse_distill.dfkd.diffcore import backward
from muse_distill.dfkd.losses import (
    TargetMask, build_target_mask, generator_total_loss, student_total_loss,
)
from muse_distill.dfkd.models import (
    ClassEmbeddingTable, ConvClassifier, EmbeddingProjection, Generator, NoisyLayer,
    build_generator, build_network, build_noisy_layer, class_center_embeddings,
    derive_radii, gaussian_code_table, generate_batch, load_embedding_table,
    min_pairwise_mse, reinit_noisy_layer,
)
from muse_distill.dfkd.pool import (
    BudgetLedger, MemoryPool, SyntheticBatch, pool_append, pool_load, pool_sample, pool_save,
)
from muse_distill.dfkd.report import MetricsRow, dump_image_name, write_metrics_csv, write_ppm
from muse_distill.dfkd.schema import AedEmbedding, EmbeddingSource, LossWeights, TrainConfig
from muse_distill.dfkd_database import crud
from muse_distill.dfkd_database.database import init_db, make_engine, make_session_factory

log = get_logger(__name__)

# Étiquettes des flux aléatoires dérivés de la graine maître
STREAM_GENERATOR = 1
STREAM_NOISY = 2
STREAM_LABELS = 3
STREAM_STUDENT = 4
STREAM_POOL = 5
STREAM_CODES = 6
STREAM_PROJECTION = 7
STREAM_TEACHER = 8
STREAM_DUMP = 9

STATE_FILE = "state.pt"
STATE_POOL_FILE = "state_pool.bin"


# ---------------- Calendriers ----------------

def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Montée linéaire 0 → base_lr sur warmup_frac·total, puis décroissance linéaire vers 0."""
    if total_steps <= 0:
        raise ValueError(f"total_steps invalide : {total_steps} (doit être > 0).")
    if not 0 <= step <= total_steps:
        raise ValueError(f"Pas {step} hors de [0, {total_steps}].")
    warmup = warmup_frac * total_steps
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError(f"total_steps invalide : {total_steps} (doit être > 0).")
    step = min(max(step, 0), total_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def resolve_iters_s(base_s: int, data_ratio: float) -> int:
    """S = max(1, round(base_S · d_r))."""
    if base_s <= 0:
        raise ValueError(f"base_S invalide : {base_s}.")
    return max(1, round(base_s * data_ratio))


def _warmup_linear(total: int, warmup_frac: float) -> Callable[[int], float]:
    return lambda step: lr_schedule(min(step, total), total, 1.0, warmup_frac)


def draw_pseudo_labels(rng: np.random.Generator, num_classes: int, batch_size: int) -> torch.Tensor:
    """Permutations complètes des classes concaténées : chaque classe sort avant toute répétition."""
    reps = -(-batch_size // num_classes)
    labels = np.concatenate([rng.permutation(num_classes) for _ in range(reps)])[:batch_size]
    return torch.from_numpy(labels.astype(np.int64))


# ---------------- État d'entraînement ----------------

@dataclass
class PhaseTotals:
    """Sommes des termes de perte sur une phase (moyennées à l'émission de la ligne)."""
    sums: Dict[str, float] = field(default_factory=dict)
    count: int = 0

    def add(self, **terms: torch.Tensor) -> None:
        for name, value in terms.items():
            self.sums[name] = self.sums.get(name, 0.0) + float(value.detach())
        self.count += 1

    def means(self) -> Dict[str, Optional[float]]:
        if not self.count:
            return {}
        return {name: total / self.count for name, total in self.sums.items()}


@dataclass
class TrainState:
    config: TrainConfig
    teacher: ConvClassifier
    student: ConvClassifier
    generators: Dict[int, Generator]
    noisy: Dict[int, NoisyLayer]
    gen_optimizers: Dict[int, Adam]
    gen_schedulers: Dict[int, LambdaLR]
    student_optimizer: AdamW
    student_scheduler: LambdaLR
    codes: ClassEmbeddingTable                  # entrées du générateur
    anchors: ClassEmbeddingTable                # f_y des pertes d'embedding
    student_projection: EmbeddingProjection
    aed_projection: EmbeddingProjection
    masks: Dict[int, TargetMask]
    weights: LossWeights
    pool: MemoryPool
    label_rng: np.random.Generator
    teacher_digest: str
    epoch: int = 0                              # époques terminées
    gen_iteration: int = 0
    student_step: int = 0
    metrics: List[MetricsRow] = field(default_factory=list)
    gen_totals: PhaseTotals = field(default_factory=PhaseTotals)
    student_totals: PhaseTotals = field(default_factory=PhaseTotals)

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)


def _anchor_batch(config: TrainConfig, generator: Generator, noisy: NoisyLayer,
                  codes: ClassEmbeddingTable) -> SyntheticBatch:
    """Premier batch généré, couvrant toutes les classes (générateur encore non entraîné)."""
    e, b = config.resolutions[0], config.batch_sizes[0]
    reps = max(1, -(-b // config.num_classes))
    labels = torch.arange(config.num_classes).repeat(reps)
    generator.eval()
    noisy.eval()
    try:
        with torch.no_grad():
            return generate_batch(generator, noisy, codes, labels, e)
    finally:
        generator.train()
        noisy.train()


def build_train_state(config: TrainConfig, teacher: ConvClassifier,
                      table: Optional[ClassEmbeddingTable] = None) -> TrainState:
    """
    Construit générateurs, couches bruitées, étudiant, optimiseurs et pool à partir
    de la graine maître. `table` remplace le fichier embedding_path quand il est fourni.
    """
    seed = config.seed
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if teacher.spec.num_classes != config.num_classes:
        raise ShapeError(f"Professeur à {teacher.spec.num_classes} classes pour K={config.num_classes}.")

    if config.embedding_source is EmbeddingSource.FILE:
        codes = table if table is not None else load_embedding_table(config.embedding_path)
        if codes.num_classes != config.num_classes:
            raise ShapeError(f"Table à {codes.num_classes} lignes pour K={config.num_classes}.")
    else:
        codes = gaussian_code_table(config.num_classes, config.embedding_dim, derive_seed(seed, STREAM_CODES))

    generators: Dict[int, Generator] = {}
    noisy: Dict[int, NoisyLayer] = {}
    gen_optimizers: Dict[int, Adam] = {}
    gen_schedulers: Dict[int, LambdaLR] = {}
    gen_total = config.epochs * config.iters_g * config.steps_g
    for e in config.resolutions:
        generators[e] = build_generator(config.generator_spec(e, codes.dim), derive_seed(seed, STREAM_GENERATOR, e))
        noisy[e] = build_noisy_layer(codes.dim, derive_seed(seed, STREAM_NOISY, e), config.bn_momentum, config.bn_eps)
        params = list(generators[e].parameters()) + list(noisy[e].parameters())
        gen_optimizers[e] = Adam(params, lr=config.lr_generator)
        gen_schedulers[e] = LambdaLR(gen_optimizers[e], _warmup_linear(gen_total, config.warmup_frac))

    if config.embedding_source is EmbeddingSource.CLASS_CENTER:
        e0 = config.resolutions[0]
        anchors = class_center_embeddings(teacher, _anchor_batch(config, generators[e0], noisy[e0], codes),
                                          config.num_classes)
    else:
        anchors = codes

    weights = config.loss_weights
    if config.radii_from_table:
        r_i, r_o = derive_radii(min_pairwise_mse(anchors))
        weights = weights.model_copy(update={"r_i": r_i, "r_o": r_o})
        log.info("Rayons dérivés de la table : r_i=%.6f r_o=%.6f", r_i, r_o)

    student = build_network(config.student_spec(), derive_seed(seed, STREAM_STUDENT))
    student_total = config.epochs * config.resolved_iters_s
    student_optimizer = AdamW(student.parameters(), lr=config.lr_student, weight_decay=config.weight_decay_student)
    student_scheduler = LambdaLR(student_optimizer, _warmup_linear(student_total, config.warmup_frac))

    proj_seed = derive_seed(seed, STREAM_PROJECTION)
    student_projection = EmbeddingProjection(config.student_spec().feature_dim, anchors.dim, proj_seed)
    if AedEmbedding(config.aed_embedding) is AedEmbedding.TEACHER:
        aed_projection = EmbeddingProjection(teacher.spec.feature_dim, anchors.dim, proj_seed + 1)
    else:
        aed_projection = student_projection

    masks = {
        e: build_target_mask(config.mask_kind, config.mask_params, teacher.spec.cam_size(e))
        for e in config.resolutions
    }
    ledger = BudgetLedger.from_ratio(config.base_resolution, config.data_ratio, config.dataset_size)
    pool = MemoryPool(ledger=ledger, rng_state=derive_seed(seed, STREAM_POOL), channels=config.channels)

    return TrainState(
        config=config, teacher=teacher, student=student, generators=generators, noisy=noisy,
        gen_optimizers=gen_optimizers, gen_schedulers=gen_schedulers,
        student_optimizer=student_optimizer, student_scheduler=student_scheduler,
        codes=codes, anchors=anchors, student_projection=student_projection,
        aed_projection=aed_projection, masks=masks, weights=weights, pool=pool,
        label_rng=np.random.default_rng(derive_seed(seed, STREAM_LABELS)),
        teacher_digest=parameter_digest(teacher),
    )


# ---------------- Phases ----------------

def _abort_with_dump(state: TrainState, resolution: int, labels: torch.Tensor,
                     images: Optional[torch.Tensor], reason: str) -> None:
    state.out_dir.mkdir(parents=True, exist_ok=True)
    dump_path = state.out_dir / f"abort_e{state.epoch + 1}_it{state.gen_iteration}_r{resolution}.pt"
    torch.save({"images": None if images is None else images.detach().cpu(), "labels": labels.cpu(),
                "codes": state.codes.lookup(labels).cpu(), "resolution": resolution,
                "epoch": state.epoch + 1, "iteration": state.gen_iteration}, dump_path)
    log.error("Perte non finie (%s) : batch sauvegardé dans %s", reason, dump_path, exc_info=True)
    raise TrainingAbortedError(f"Perte non finie à e={resolution} ({reason}) ; diagnostic : {dump_path}")


def generator_phase(state: TrainState, config: Optional[TrainConfig] = None) -> TrainState:
    """
    I itérations : réinitialisation de Z et tirage de ŷ, puis g pas d'Adam par
    générateur de résolution ; seuls les batches du dernier pas entrent dans le pool.
    Sans effet une fois le budget épuisé.
    """
    config = config or state.config
    if state.pool.ledger.exhausted:
        log.info("Budget épuisé : phase générateur ignorée (époque %d).", state.epoch + 1)
        return state

    state.student.eval()
    for it in range(config.iters_g):
        if state.pool.ledger.exhausted:
            log.info("Budget épuisé après %d itérations de génération.", it)
            break
        labels: Dict[int, torch.Tensor] = {}
        for e, b in zip(config.resolutions, config.batch_sizes):
            noisy = reinit_noisy_layer(state.noisy[e],
                                       derive_seed(config.seed, STREAM_NOISY, state.epoch, state.gen_iteration, e))
            optimizer = state.gen_optimizers[e]
            for p in noisy.parameters():
                optimizer.state.pop(p, None)
            labels[e] = draw_pseudo_labels(state.label_rng, config.num_classes, b)

        final: Dict[int, SyntheticBatch] = {}
        for step in range(config.steps_g):
            for e in config.resolutions:
                generator, noisy, optimizer = state.generators[e], state.noisy[e], state.gen_optimizers[e]
                generator.train()
                noisy.train()
                optimizer.zero_grad(set_to_none=True)
                batch = None
                try:
                    batch = generate_batch(generator, noisy, state.codes, labels[e], e,
                                           epoch=state.epoch + 1, iteration=state.gen_iteration)
                    terms = generator_total_loss(batch, state.teacher, state.student, state.anchors,
                                                 state.weights, state.masks[e], state.aed_projection,
                                                 config.aed_embedding)
                    backward(terms.total)
                except NonFiniteError as err:
                    _abort_with_dump(state, e, labels[e], None if batch is None else batch.images, str(err))
                optimizer.step()
                state.gen_schedulers[e].step()
                state.gen_totals.add(ce=terms.ce, adv=terms.adv, bn=terms.bn, cam=terms.cam, aed=terms.aed)
                log.debug("G e=%d it=%d pas=%d L_G=%.5f", e, state.gen_iteration, step, float(terms.total))
                final[e] = batch

        for e in config.resolutions:
            if state.pool.ledger.exhausted:
                break
            pool_append(state.pool, final[e])
        state.gen_iteration += 1
    return state


def student_phase(state: TrainState, config: Optional[TrainConfig] = None) -> TrainState:
    """S pas d'AdamW sur des minibatches tirés du pool ; le professeur n'est pas modifié."""
    config = config or state.config
    if state.pool.num_images == 0:
        raise TrainingAbortedError("Pool vide : la phase étudiant n'a rien à apprendre.")
    state.student.train()
    batch_size = config.resolved_student_batch_size
    for _ in range(config.resolved_iters_s):
        batch = pool_sample(state.pool, batch_size)
        state.student_optimizer.zero_grad(set_to_none=True)
        terms = student_total_loss(batch, state.teacher, state.student, state.anchors,
                                   state.weights, state.student_projection)
        backward(terms.total)
        state.student_optimizer.step()
        state.student_scheduler.step()
        state.student_totals.add(kl=terms.kl, ed=terms.ed)
        state.student_step += 1
    return state


# ---------------- Évaluation ----------------

def evaluate(model: ConvClassifier, images: torch.Tensor, labels: torch.Tensor,
             resolution: Union[str, int] = "native", batch_size: int = 500) -> Tuple[float, float]:
    """Top-1 / top-5 en pourcentage ; `resolution` entière = redimensionnement bilinéaire."""
    if images.shape[0] != labels.shape[0]:
        raise ShapeError(f"{images.shape[0]} images pour {labels.shape[0]} étiquettes.")
    if images.shape[0] == 0:
        raise ValueError("Jeu d'évaluation vide.")
    if labels.numel() and int(labels.max()) >= model.spec.num_classes:
        raise ShapeError(f"Étiquette {int(labels.max())} pour un modèle à {model.spec.num_classes} classes.")
    target = images.shape[-1] if resolution == "native" else int(resolution)
    if target < model.min_resolution:
        raise ShapeError(f"Résolution d'évaluation {target} inférieure au minimum du modèle ({model.min_resolution}).")

    k = min(5, model.spec.num_classes)
    was_training = model.training
    model.eval()
    hits1 = hits5 = 0
    try:
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                x = images[start:start + batch_size]
                y = labels[start:start + batch_size]
                if x.shape[-1] != target or x.shape[-2] != target:
                    x = F.interpolate(x, size=(target, target), mode="bilinear", align_corners=False)
                topk = model(x).topk(k, dim=1).indices
                hits1 += int((topk[:, 0] == y).sum())
                hits5 += int((topk == y[:, None]).any(dim=1).sum())
    finally:
        model.train(was_training)
    n = images.shape[0]
    return 100.0 * hits1 / n, 100.0 * hits5 / n


def verify_teacher(teacher: ConvClassifier, meta: Dict, test_set: LabeledImages, tolerance: float) -> float:
    """La précision mesurée doit rester à `tolerance` points de celle enregistrée au checkpoint."""
    top1, _ = evaluate(teacher, test_set.images, test_set.labels)
    recorded = meta.get("test_top1")
    if recorded is None:
        log.warning("Aucune précision enregistrée pour le professeur ; mesurée : %.2f%%.", top1)
        return top1
    if abs(top1 - float(recorded)) > tolerance:
        raise TrainingAbortedError(
            f"Précision du professeur {top1:.2f}% éloignée de la valeur enregistrée {float(recorded):.2f}%."
        )
    log.info("Professeur vérifié : %.2f%% (enregistré %.2f%%).", top1, float(recorded))
    return top1


# ---------------- Persistance de l'état (reprise) ----------------

def save_run_state(state: TrainState, out_dir: Union[str, Path, None] = None) -> Path:
    out_dir = Path(out_dir or state.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool_save(state.pool, out_dir / STATE_POOL_FILE)
    payload = {
        "epoch": state.epoch,
        "gen_iteration": state.gen_iteration,
        "student_step": state.student_step,
        "pool_exhausted": state.pool.ledger.exhausted,
        "student": state.student.state_dict(),
        "student_optimizer": state.student_optimizer.state_dict(),
        "student_scheduler": state.student_scheduler.state_dict(),
        "generators": {e: g.state_dict() for e, g in state.generators.items()},
        "noisy": {e: z.state_dict() for e, z in state.noisy.items()},
        "gen_optimizers": {e: o.state_dict() for e, o in state.gen_optimizers.items()},
        "gen_schedulers": {e: s.state_dict() for e, s in state.gen_schedulers.items()},
        "label_rng": state.label_rng.bit_generator.state,
        "codes": state.codes.rows,
        "anchors": state.anchors.rows,
        "weights": state.weights.model_dump(),
        "teacher_digest": state.teacher_digest,
        "metrics": [row.model_dump() for row in state.metrics],
    }
    path = out_dir / STATE_FILE
    torch.save(payload, path)
    log.debug("État du run enregistré : %s (époque %d)", path, state.epoch)
    return path


def load_run_state(state: TrainState, out_dir: Union[str, Path, None] = None) -> TrainState:
    """Recharge dans un état fraîchement construit tout ce qu'a écrit save_run_state."""
    out_dir = Path(out_dir or state.out_dir)
    payload = torch.load(out_dir / STATE_FILE, weights_only=False)
    if payload["teacher_digest"] != state.teacher_digest:
        raise TrainingAbortedError("Le professeur a changé depuis l'enregistrement du run : reprise impossible.")
    state.pool = pool_load(out_dir / STATE_POOL_FILE, expected_base_resolution=state.config.base_resolution,
                           channels=state.config.channels)
    state.pool.ledger.exhausted = payload["pool_exhausted"]
    state.epoch = payload["epoch"]
    state.gen_iteration = payload["gen_iteration"]
    state.student_step = payload["student_step"]
    state.student.load_state_dict(payload["student"])
    state.student_optimizer.load_state_dict(payload["student_optimizer"])
    state.student_scheduler.load_state_dict(payload["student_scheduler"])
    for e in state.config.resolutions:
        state.generators[e].load_state_dict(payload["generators"][e])
        state.noisy[e].load_state_dict(payload["noisy"][e])
        state.gen_optimizers[e].load_state_dict(payload["gen_optimizers"][e])
        state.gen_schedulers[e].load_state_dict(payload["gen_schedulers"][e])
    state.label_rng.bit_generator.state = payload["label_rng"]
    state.codes = ClassEmbeddingTable(payload["codes"], state.codes.source)
    state.anchors = ClassEmbeddingTable(payload["anchors"], state.anchors.source)
    state.weights = LossWeights(**payload["weights"])
    state.metrics = [MetricsRow(**row) for row in payload["metrics"]]
    log.info("Reprise du run à l'époque %d (%d images dans le pool).", state.epoch + 1, state.pool.num_images)
    return state


# ---------------- Boucle complète ----------------

@dataclass
class TrainResult:
    student: ConvClassifier
    metrics: List[MetricsRow]
    pool: MemoryPool
    final_top1: Optional[float] = None
    final_top5: Optional[float] = None


def run_id_for(config: TrainConfig) -> str:
    digest = hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()[:12]
    return f"muse-{config.seed}-{digest}"


def _open_ledger(url: Optional[str], config: TrainConfig, resume_epoch: int):
    if not url:
        return None

    engine = make_engine(url)
    init_db(engine)
    session = make_session_factory(engine)()
    run_id = run_id_for(config)
    crud.create_run(session, run_id, config.seed, config.model_dump_json())
    crud.clear_metrics_from(session, run_id, resume_epoch + 1)
    session.commit()
    return session, run_id


def train(config: TrainConfig, teacher: ConvClassifier, test_set: Optional[LabeledImages] = None,
          teacher_meta: Optional[Dict] = None, table: Optional[ClassEmbeddingTable] = None,
          resume: bool = False, metrics_db: Optional[str] = None) -> TrainResult:
    """
    E époques de phase générateur puis phase étudiant. Écrit sous out_dir :
    metrics.csv, train.log, state.pt (+ pool), student.ckpt, snapshots de pool et images.
    """
    seed_everything(config.seed, config.threads)
    if test_set is not None and teacher_meta is not None:
        verify_teacher(teacher, teacher_meta, test_set, config.teacher_accuracy_tolerance)

    state = build_train_state(config, teacher, table)
    out_dir = state.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if (out_dir / STATE_FILE).exists():
            load_run_state(state)
        else:
            log.warning("Aucun état à reprendre dans %s : démarrage d'un nouveau run.", out_dir)

    ledger = _open_ledger(metrics_db, config, state.epoch)
    if ledger is not None:
        session, run_id = ledger

    run_log = attach_run_log(out_dir)
    log.info("Distillation : E=%d, I=%d, g=%d, S=%d, résolutions=%s, budget=%.2f unités",
             config.epochs, config.iters_g, config.steps_g, config.resolved_iters_s,
             config.resolutions, float(state.pool.ledger.capacity_units))
    top1 = top5 = None
    try:
        while state.epoch < config.epochs:
            epoch = state.epoch + 1
            rows: List[MetricsRow] = []

            started = time.perf_counter()
            state.gen_totals = PhaseTotals()
            generator_phase(state, config)
            g = state.gen_totals.means()
            rows.append(MetricsRow(
                epoch=epoch, phase="generator", loss_ce=g.get("ce"), loss_adv=g.get("adv"), loss_bn=g.get("bn"),
                loss_cam=g.get("cam"), loss_aed=g.get("aed"), pool_units=float(state.pool.ledger.spent_units),
                wall_seconds=time.perf_counter() - started if config.log_wall_time else None,
            ))

            started = time.perf_counter()
            state.student_totals = PhaseTotals()
            student_phase(state, config)
            s = state.student_totals.means()
            rows.append(MetricsRow(
                epoch=epoch, phase="student", loss_kl=s.get("kl"), loss_ed=s.get("ed"),
                pool_units=float(state.pool.ledger.spent_units),
                wall_seconds=time.perf_counter() - started if config.log_wall_time else None,
            ))

            if parameter_digest(state.teacher) != state.teacher_digest:
                raise TrainingAbortedError(f"Paramètres du professeur modifiés pendant l'époque {epoch}.")

            if test_set is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
                top1, top5 = evaluate(state.student, test_set.images, test_set.labels, config.eval_policy)
                rows.append(MetricsRow(epoch=epoch, phase="eval", pool_units=float(state.pool.ledger.spent_units),
                                       top1=top1, top5=top5))
                log.info("Époque %d/%d : top1=%.2f%% top5=%.2f%% pool=%d images",
                         epoch, config.epochs, top1, top5, state.pool.num_images)
            else:
                log.info("Époque %d/%d terminée : pool=%d images", epoch, config.epochs, state.pool.num_images)

            state.metrics.extend(rows)
            state.epoch = epoch
            write_metrics_csv(state.metrics, out_dir / "metrics.csv")
            if config.pool_snapshot_every and epoch % config.pool_snapshot_every == 0:
                pool_save(state.pool, out_dir / f"pool_e{epoch}.bin")
            save_run_state(state)
            if ledger is not None:
                for row in rows:
                    crud.add_metrics_record(session, run_id, row)
                session.commit()
    except Exception:
        if ledger is not None:
            session.rollback()
            crud.set_run_status(session, run_id, "aborted")
            session.commit()
            session.close()
        detach_run_log(run_log)
        raise

    pool_save(state.pool, out_dir / "pool.bin")
    save_checkpoint(state.student, out_dir / "student.ckpt",
                    meta={"test_top1": top1, "test_top5": top5, "seed": config.seed})
    if config.dump_images:
        dump_pool_images(state.pool, config.dump_images, out_dir / "images", derive_seed(config.seed, STREAM_DUMP))
    if ledger is not None:
        crud.set_run_status(session, run_id, "completed")
        session.commit()
        session.close()
    detach_run_log(run_log)
    return TrainResult(state.student, state.metrics, state.pool, top1, top5)


def dump_pool_images(pool: MemoryPool, count: int, out_dir: Union[str, Path], seed: int) -> List[Path]:
    """Exporte `count` images tirées du pool (sans toucher à son flux interne)."""
    if pool.num_images == 0:
        raise ValueError("Pool vide : aucune image à exporter.")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    written = []
    for index in range(count):
        sample = pool_sample(pool, 1, rng=rng)
        path = out_dir / dump_image_name(index, int(sample.labels[0]), sample.resolution)
        write_ppm(sample.images[0], path)
        written.append(path)
    log.info("%d images exportées dans %s", count, out_dir)
    return written


# ---------------- Pré-entraînement du professeur ----------------

def train_teacher(config: TrainConfig, train_set: LabeledImages,
                  test_set: Optional[LabeledImages] = None) -> Tuple[ConvClassifier, Optional[float]]:
    """SGD momentum, décroissance de poids, taux cosinus par pas ; retourne le modèle et sa précision test."""
    seed_everything(config.seed, config.threads)
    model = build_network(config.teacher_spec(), derive_seed(config.seed, STREAM_TEACHER))
    optimizer = SGD(model.parameters(), lr=config.teacher_lr, momentum=config.teacher_momentum,
                    weight_decay=config.teacher_weight_decay)
    n, bs = train_set.images.shape[0], config.teacher_batch_size
    steps_per_epoch = max(1, n // bs) if n >= bs else 1
    total = config.teacher_epochs * steps_per_epoch
    scheduler = LambdaLR(optimizer, lambda step: cosine_lr(step, total, 1.0))
    order_gen = torch_generator(derive_seed(config.seed, STREAM_TEACHER, 1))

    model.train()
    for epoch in range(1, config.teacher_epochs + 1):
        order = torch.randperm(n, generator=order_gen)
        running = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * bs:(step + 1) * bs]
            if idx.numel() < 2:
                continue
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(train_set.images[idx]), train_set.labels[idx])
            backward(loss)
            optimizer.step()
            scheduler.step()
            running += float(loss.detach())
        log.info("Professeur époque %d/%d : perte=%.4f lr=%.5f", epoch, config.teacher_epochs,
                 running / steps_per_epoch, optimizer.param_groups[0]["lr"])

    model.eval()
    top1 = None
    if test_set is not None:
        top1, top5 = evaluate(model, test_set.images, test_set.labels)
        log.info("Professeur : top1=%.2f%% top5=%.2f%%", top1, top5)
    return model, top1
