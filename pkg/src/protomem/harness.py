"""Session protocol: disjoint class streams, union-of-classes evaluation,
ablation rows, and the synthetic desk-scale datasets."""

from dataclasses import dataclass, field

import numpy as np

from .backbone import forward_backbone, forward_fcr, init_model
from .data import LabeledDataset, SessionStream
from .errors import ConflictingFlagsError
from .losses import PretrainLossConfig
from .memory import QuantSpec, classify
from .offline import MetaConfig, build_base_em, init_fcc, metalearn, pretrain
from .online import FinetuneConfig, finetune_fcr, learn_class

ABLATION_FLAGS = ("AG", "OR", "MM", "CE", "FT")


@dataclass
class SessionReport:
    session_accuracies: list
    average: float
    base_class_accuracies: list
    evaluated_class_sets: list  # sorted class ids evaluated per session
    evaluated_counts: list  # test samples touched per session
    probe_scores: list  # per session: list of {class_id: score} per probe
    config_echo: dict = field(default_factory=dict)


def validate_stream(stream: SessionStream) -> list:
    """Check disjointness, way/shot counts, and test coverage.

    Returns a list of violation strings; empty means the stream is valid.
    """
    violations = []
    groups = [("base", stream.base)] + [
        (f"session {t + 1}", s) for t, s in enumerate(stream.sessions)
    ]
    seen: dict[int, str] = {}
    for name, ds in groups:
        for cid in ds.class_ids():
            if cid in seen:
                violations.append(
                    f"class {cid} appears in both {seen[cid]} and {name}"
                )
            else:
                seen[cid] = name
    for t, s in enumerate(stream.sessions, start=1):
        ids = s.class_ids()
        if len(ids) != stream.ways:
            violations.append(
                f"session {t} has {len(ids)} classes, expected {stream.ways}"
            )
        for cid in ids:
            got = int((s.labels == cid).sum())
            if got != stream.shots:
                violations.append(
                    f"session {t} class {cid} has {got} samples, expected {stream.shots}"
                )
    test_ids = set(stream.test.class_ids())
    for cid in sorted(seen):
        if cid not in test_ids:
            violations.append(f"class {cid} has no test samples")
    return violations


def extract_features(params, dataset: LabeledDataset) -> np.ndarray:
    """Prototype-space features for every dataset row."""
    return forward_fcr(params, forward_backbone(params, dataset.inputs))


def _evaluate(params, em, test: LabeledDataset, class_subset, base_ids):
    subset = test.subset_by_classes(class_subset)
    feats = extract_features(params, subset)
    hits = base_hits = base_total = 0
    base_set = set(base_ids)
    for row, lab in zip(feats, subset.labels):
        pred, _ = classify(em, row)
        ok = int(pred == lab)
        hits += ok
        if int(lab) in base_set:
            base_hits += ok
            base_total += 1
    acc = hits / len(subset) if len(subset) else 0.0
    base_acc = base_hits / base_total if base_total else 0.0
    return acc, base_acc, len(subset)


def _probe(params, em, probes):
    if not probes:
        return []
    feats = extract_features(params, LabeledDataset(np.asarray(probes), np.zeros(len(probes), dtype=np.int64)))
    out = []
    for row in feats:
        _, scores = classify(em, row)
        out.append({cid: float(s) for cid, s in zip(em.class_ids(), scores)})
    return out


def run_protocol(
    params,
    stream: SessionStream,
    quant: QuantSpec,
    finetune: bool = False,
    ft_cfg: FinetuneConfig | None = None,
    probes=None,
) -> SessionReport:
    """Play the stream: build the base memory, absorb each incremental
    session with single-pass updates (optionally finetuning the
    projection), and evaluate each stage on the union of classes seen."""
    em, act_mem = build_base_em(params, stream.base, quant)
    base_ids = stream.base.class_ids()
    if finetune and ft_cfg is None:
        ft_cfg = FinetuneConfig()
    accs, base_accs, class_sets, counts, probe_rows = [], [], [], [], []

    def record(t):
        seen = stream.classes_through(t)
        acc, base_acc, n = _evaluate(params, em, stream.test, seen, base_ids)
        accs.append(acc)
        base_accs.append(base_acc)
        class_sets.append(seen)
        counts.append(n)
        probe_rows.append(_probe(params, em, probes))

    record(0)
    for t, session in enumerate(stream.sessions, start=1):
        for cid in session.class_ids():
            rows = session.indices_of(cid)
            learn_class(em, act_mem, params, session.inputs[rows], cid)
        if finetune:
            finetune_fcr(params, act_mem, em, ft_cfg)
        record(t)
    return SessionReport(
        session_accuracies=accs,
        average=float(np.mean(accs)),
        base_class_accuracies=base_accs,
        evaluated_class_sets=class_sets,
        evaluated_counts=counts,
        probe_scores=probe_rows,
        config_echo={
            "ways": stream.ways,
            "shots": stream.shots,
            "finetune": finetune,
            "prototype_bits": quant.prototype_bits,
            "feature_bits": quant.feature_bits,
            "d_a": params.d_a,
            "d_p": params.d_p,
        },
    )


def forgetting_metrics(report: SessionReport, base_only_accuracies) -> list:
    """Per-session drop of base-class accuracy relative to session 0."""
    ref = base_only_accuracies[0]
    return [ref - a for a in base_only_accuracies]


@dataclass
class TrainRecipe:
    """Desk-scale training hyperparameters shared by ablation rows."""

    hidden: tuple = (96, 48)
    d_p: int = 32
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.002
    batch_size: int = 32
    lambda_ortho: float = 0.1
    mix_probability: float = 0.4
    mix_alpha: float = 1.0
    margin: float = 0.1
    meta_samples: int = 5
    meta_iterations: int = 150
    meta_lr: float = 0.01
    query_batch: int = 64
    finetune_epochs: int = 20
    finetune_sub_batch: int = 4
    finetune_lr: float = 0.01
    seed: int = 7
    grid: tuple | None = None


def train_pipeline(stream: SessionStream, recipe: TrainRecipe, flags: set):
    """One full pipeline for an ablation row: init, pretrain, optional
    metalearning, protocol run. Returns (params, report)."""
    bad = set(flags) - set(ABLATION_FLAGS)
    if bad:
        raise ConflictingFlagsError(f"unknown flags {sorted(bad)}")
    if "MM" in flags and "CE" in flags:
        raise ConflictingFlagsError("MM and CE metalearning are mutually exclusive")
    dims = [stream.base.input_dim, *recipe.hidden, recipe.d_p]
    params = init_model(dims, split_point=len(dims) - 2, seed=recipe.seed)
    base_ids = stream.base.class_ids()
    fcc = init_fcc(len(base_ids), recipe.d_p, recipe.seed + 1)
    cfg = PretrainLossConfig(
        lambda_ortho=recipe.lambda_ortho if "OR" in flags else 0.0,
        mix_probability=recipe.mix_probability if "AG" in flags else 0.0,
        mix_alpha=recipe.mix_alpha,
        margin=recipe.margin,
    )
    pretrain(
        params,
        fcc,
        stream.base,
        cfg,
        epochs=recipe.pretrain_epochs,
        lr=recipe.pretrain_lr,
        seed=recipe.seed,
        batch_size=recipe.batch_size,
        grid=recipe.grid,
    )
    if "MM" in flags or "CE" in flags:
        meta = MetaConfig(
            meta_samples=recipe.meta_samples,
            iterations=recipe.meta_iterations,
            lr=recipe.meta_lr,
            margin=recipe.margin,
            query_batch=recipe.query_batch,
            objective="mm" if "MM" in flags else "ce",
        )
        metalearn(params, stream.base, meta, seed=recipe.seed + 2)
    ft_cfg = FinetuneConfig(
        epochs=recipe.finetune_epochs,
        sub_batch=recipe.finetune_sub_batch,
        lr=recipe.finetune_lr,
    )
    report = run_protocol(
        params, stream, QuantSpec(), finetune="FT" in flags, ft_cfg=ft_cfg
    )
    report.config_echo["flags"] = "+".join(sorted(flags)) if flags else "none"
    report.config_echo["lambda_ortho"] = cfg.lambda_ortho
    report.config_echo["mix_probability"] = cfg.mix_probability
    return params, report


def ablation_matrix(stream: SessionStream, rows, recipe: TrainRecipe) -> list:
    """Train and evaluate one configuration per flag set.

    rows: iterable of flag collections over {AG, OR, MM, CE, FT}.
    Returns [(flags_label, SessionReport), ...] in input order.
    """
    out = []
    for row in rows:
        flags = set(row)
        _, report = train_pipeline(stream, recipe, flags)
        out.append((report.config_echo["flags"], report))
    return out


def ortho_strength_sweep(stream: SessionStream, recipe: TrainRecipe,
                         strengths=(0.01, 0.1, 1.0)) -> list:
    """Pretrain once per regularization strength and measure the effect.

    Returns rows (strength, train accuracy, mean off-diagonal |Gram| on
    held-out features); the desk-scale picture behind the default 0.1.
    """
    rows = []
    for lam in strengths:
        dims = [stream.base.input_dim, *recipe.hidden, recipe.d_p]
        params = init_model(dims, split_point=len(dims) - 2, seed=recipe.seed)
        fcc = init_fcc(len(stream.base.class_ids()), recipe.d_p, recipe.seed + 1)
        cfg = PretrainLossConfig(
            lambda_ortho=lam,
            mix_probability=recipe.mix_probability,
            mix_alpha=recipe.mix_alpha,
            margin=recipe.margin,
        )
        _, _, history = pretrain(
            params, fcc, stream.base, cfg,
            epochs=recipe.pretrain_epochs, lr=recipe.pretrain_lr,
            seed=recipe.seed, batch_size=recipe.batch_size, grid=recipe.grid,
        )
        feats = extract_features(params, stream.test)
        u = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        gram = u @ u.T
        off = float(np.abs(gram[~np.eye(len(gram), dtype=bool)]).mean())
        rows.append((lam, history[-1][3], off))
    return rows


def make_blob_dataset(
    num_classes: int,
    per_class: int,
    grid: int = 16,
    seed=0,
    noise: float = 0.05,
    max_shift: int = 1,
) -> LabeledDataset:
    """Gaussian-bump class templates rendered to a grid, jittered by
    integer shifts and pixel noise; inputs are flattened to [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:grid, 0:grid]
    templates = []
    for _ in range(num_classes):
        img = np.zeros((grid, grid))
        for _ in range(2):
            cy, cx = rng.uniform(0.2 * grid, 0.8 * grid, size=2)
            sigma = rng.uniform(0.09, 0.16) * grid
            amp = rng.uniform(0.7, 1.0)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        templates.append(np.clip(img, 0.0, 1.0))
    inputs = np.empty((num_classes * per_class, grid * grid))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    row = 0
    for cid, tpl in enumerate(templates):
        for _ in range(per_class):
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(tpl, (int(dy), int(dx)), axis=(0, 1))
            img = img + rng.normal(0.0, noise, size=img.shape)
            inputs[row] = np.clip(img, 0.0, 1.0).reshape(-1)
            labels[row] = cid
            row += 1
    return LabeledDataset(inputs, labels)


def make_points_dataset(
    num_classes: int, per_class: int, dim: int = 2, separation: float = 6.0, seed=0
) -> LabeledDataset:
    """Gaussian point clouds with centers at equal angles on a circle of
    radius `separation`; linearly separable when the radius dominates the
    unit noise."""
    if dim < 2:
        raise ValueError("point clouds need dim >= 2")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = separation * np.cos(angles)
    centers[:, 1] = separation * np.sin(angles)
    inputs = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    row = 0
    for cid in range(num_classes):
        pts = centers[cid] + rng.standard_normal((per_class, dim))
        inputs[row : row + per_class] = pts
        labels[row : row + per_class] = cid
        row += per_class
    return LabeledDataset(inputs, labels)
