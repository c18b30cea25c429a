"""Pipeline steps over one run directory.

Each step reads earlier artifacts from the run directory, writes its own
under fixed names and returns a summary dict.  The :class:`Run` object
records every file read and written and every derived seed, which is what
the CLI puts in the step manifest.  All randomness comes from
``derive_seed(config.seed, component)``, so a rerun with the same
configuration reproduces every CSV byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import evaluation as ev
from . import formats, plots, scan, sigproc, synthgen, udr, vae
from .config import PipelineConfig, derive_seed
from .formats import Dataset
from .labels import BLOCKS, FACTORS, LabelVector

log = logging.getLogger(__name__)

SOURCE_CODES = {"ERP": 0, "SMPL": 1}
TRAVERSE_STEPS = 7
REFERENCE_PARTICIPANT = 0

PATHS = dict(
    train_erp="data/train_erp.eegd",
    train_smpl="data/train_smpl.eegd",
    heldout_erp="data/heldout_erp.eegd",
    heldout_smpl="data/heldout_smpl.eegd",
    heldout_true="data/heldout_true.eegd",
    labels="labels.csv",
    rejections="rejections.csv",
    lpp="lpp_features.csv",
    filter_response="filter_response",
    rejection_summary="rejection_summary.csv",
    models="models",
    trace="training_trace",
    udr="udr.csv",
    udr_plot="udr_scatter",
    scan_model="models/scan_full.ckpt",
    association="scan_association.csv",
    symbol_gaps="symbol_gaps.csv",
    symbols="symbol_samples",
    folds="folds.csv",
    classify="classify.csv",
    chance="chance.csv",
    pr="pr_curves",
    traverse="traversal",
    reconstruct="reconstruct.csv",
    recon_plot="reconstruction_examples",
    results="results.csv",
    results_plot="results_plot",
    summary="summary.json",
)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A run directory plus the bookkeeping for its manifest."""

    def __init__(self, config: PipelineConfig, root, reuse_models: bool = False):
        self.config = config
        self.root = Path(root)
        self.reuse_models = reuse_models
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}

    def path(self, key_or_rel: str) -> Path:
        rel = PATHS.get(key_or_rel, key_or_rel)
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def seed(self, component: str) -> int:
        s = derive_seed(self.config.seed, component)
        self.seeds[component] = s
        return s

    def _rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return str(p.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(p)

    def note_input(self, p: Path) -> Path:
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input {p}; run the step that produces it first")
        self.inputs[self._rel(p)] = sha256_file(p)
        return Path(p)

    def note_output(self, p: Path) -> Path:
        self.outputs[self._rel(p)] = sha256_file(p)
        return Path(p)

    def read_dataset(self, key: str) -> Dataset:
        return formats.read_dataset(self.note_input(self.path(key)))

    def read_checkpoint(self, p: Path):
        return formats.read_checkpoint(self.note_input(Path(p)))

    def write_csv(self, key_or_path, header, rows) -> Path:
        p = key_or_path if isinstance(key_or_path, Path) else self.path(key_or_path)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        return self.note_output(p)

    def write_figure(self, key: str, panels, **kw) -> None:
        for p in plots.write_figure(self.path(key), panels, **kw):
            self.note_output(p)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return int(v)
    if isinstance(v, bool):
        return int(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# synth / preprocess
# ---------------------------------------------------------------------------


def cohort_spec(config: PipelineConfig, n: int, seed: int) -> synthgen.CohortSpec:
    s = config.synth
    return synthgen.CohortSpec(
        n_participants=n, label_marginals=s.label_marginals, trials_per_condition=s.trials_per_condition,
        kept_trials_target=s.kept_trials_target, noise_scale=s.noise_scale, artifact_rate=s.artifact_rate,
        seed=seed, lpp_amplitude=s.lpp_amplitude, gain_spread=s.gain_spread, line_hz=s.line_hz)


def filters_for(config: PipelineConfig) -> tuple:
    p = config.preprocess
    return (sigproc.design_butterworth("high-pass", p.highpass_order, p.highpass_hz),
            sigproc.design_butterworth("low-pass", p.lowpass_order, p.lowpass_hz))


def true_image(profile: synthgen.ParticipantProfile, filters) -> np.ndarray:
    """Noise-free ERP image: the generator template through the same
    filtering, epoching, baseline correction and min-max mapping."""
    t = synthgen.trial_times()
    erp = {}
    for c in synthgen.CONDITIONS:
        rec = synthgen.TrialRecording(synthgen.erp_template(profile, c, t), c, synthgen.PRE_SAMPLES)
        ep = sigproc.segment_epochs(sigproc.filter_trial(rec, filters), profile.id)
        erp[c] = sigproc.baseline_correct(ep.samples)
    return sigproc.assemble_image(erp["neutral"], erp["positive"], "ERP", profile.id).values


def _dataset(records) -> Dataset:
    """records: (participant id, LabelVector, source tag, 6x256 image)."""
    return Dataset(np.array([r[0] for r in records], dtype=np.uint32),
                   np.stack([r[1].encode() for r in records]).astype(np.uint8),
                   np.array([SOURCE_CODES[r[2]] for r in records], dtype=np.uint8),
                   np.stack([r[3] for r in records]).astype(np.float32))


def synthesize(run: Run) -> dict:
    """Synthesize the training and held-out cohorts and preprocess every
    session into ERP and SMPL images, LPP features and rejection rows."""
    cfg = run.config
    filt = filters_for(cfg)
    splits = (("train", cfg.synth.n_participants, 0),
              ("heldout", cfg.synth.heldout_participants, cfg.synth.n_participants))
    label_rows, lpp_rows, rejections = [], [], []
    injected = rejected = 0
    for split, n, offset in splits:
        spec = cohort_spec(cfg, n, run.seed(f"synth/{split}"))
        smpl_seed = run.seed(f"smpl/{split}")
        erp, smpl, truth = [], [], []
        # offset ids so the two cohorts share one participant id space
        for prof in (replace(p, id=p.id + offset) for p in synthgen.sample_cohort(spec)):
            trials = synthgen.synthesize_session(prof, spec)
            injected += sum(t.artifact is not None for t in trials)
            res = sigproc.process_participant(trials, prof.id, rng=np.random.default_rng([smpl_seed, prof.id]),
                                              n_smpl=cfg.synth.smpl_per_participant, filters=filt)
            rejected += len(res.report.rejected)
            rejections.append((prof.id, res.report))
            lab = prof.labels
            erp.append((prof.id, lab, "ERP", res.image.values))
            smpl += [(prof.id, lab, "SMPL", im.values) for im in res.smpl]
            if split == "heldout":
                truth.append((prof.id, lab, "ERP", true_image(prof, filt)))
            label_rows.append([prof.id, split, *lab.as_tuple(), prof.anhedonia, prof.gain])
            lpp_rows.append([prof.id, split, *res.lpp])
        if n == 0:
            continue
        for key, recs in ((f"{split}_erp", erp), (f"{split}_smpl", smpl), (f"{split}_true", truth)):
            if recs:
                formats.write_dataset(run.path(key), _dataset(recs))
                run.note_output(run.path(key))
    run.write_csv("labels", ["participant_id", "split", *FACTORS, "anhedonia", "gain"], label_rows)
    run.write_csv("lpp", ["participant_id", "split", "lpp_fz", "lpp_cz", "lpp_pz"], lpp_rows)
    sigproc.write_rejection_csv(run.path("rejections"), rejections)
    run.note_output(run.path("rejections"))
    return dict(participants={s: n for s, n, _ in splits}, injected_artifacts=injected, rejected_epochs=rejected)


def preprocess(run: Run) -> dict:
    """Filter design report (response curves around both cutoffs) and
    rejection counts per rule from the synth step's rejection rows."""
    hp, lp = filters_for(run.config)
    freqs = np.unique(np.concatenate([np.geomspace(0.01, 124.0, 200), [hp.cutoff_hz, lp.cutoff_hz]]))
    gains = {}
    rows = []
    for f in (hp, lp):
        db = 20 * np.log10(np.abs(sigproc.frequency_response(f, freqs)))
        gains[f.kind] = float(20 * np.log10(abs(sigproc.frequency_response(f, [f.cutoff_hz])[0])))
        rows.append(plots.Panel(f"{f.kind} order {f.order} at {f.cutoff_hz:g} Hz",
                                {"gain dB": (np.log10(freqs), db)}, xlabel="log10 Hz", ylabel="dB"))
    run.write_figure("filter_response", rows, columns=2)
    labels = {int(r["participant_id"]): r["split"] for r in read_csv(run.note_input(run.path("labels")))}
    counts: dict = {}
    for r in read_csv(run.note_input(run.path("rejections"))):
        key = (labels[int(r["participant_id"])], r["rule"])
        counts[key] = counts.get(key, 0) + 1
    out = [[split, rule, counts.get((split, rule), 0)] for split in ("train", "heldout")
           for rule in ("amplitude", "sigma", "transient")]
    run.write_csv("rejection_summary", ["split", "rule", "count"], out)
    return dict(cutoff_gain_db=gains, rejections={f"{a}/{b}": c for a, b, c in out})


# ---------------------------------------------------------------------------
# training and model selection
# ---------------------------------------------------------------------------


def model_file(run: Run, mode: str, beta: float, index: int) -> Path:
    name = "ae" if mode == "AE" else f"bvae_b{beta:.4f}"
    return run.path(f"{PATHS['models']}/{name}_s{index}.ckpt")


def train_config(run: Run, mode: str, beta: float, index: int) -> vae.TrainConfig:
    t = run.config.train
    beta = 0.0 if mode == "AE" else float(beta)
    return vae.TrainConfig(mode=mode, beta=beta, lr=t.lr, batch=t.batch, iterations=t.iterations,
                           seed=run.seed(f"train/{mode}/{beta!r}/{index}"), dtype=t.dtype)


def train_model(run: Run, mode: str, beta: float, index: int, images: np.ndarray) -> Path:
    config = train_config(run, mode, beta, index)
    path = model_file(run, mode, beta, index)
    if run.reuse_models and path.exists():
        old = formats.read_checkpoint(path)
        if old.config == config:
            log.info("reusing %s", path)
            return run.note_output(path)
    log.info("training %s beta=%g seed index %d", mode, config.beta, index)
    formats.write_checkpoint(path, vae.train(images, config))
    return run.note_output(path)


def sweep_grid(config: PipelineConfig) -> list[tuple[str, float, int]]:
    grid = [("BVAE", float(b), i) for b in config.sweep.betas for i in range(config.sweep.seeds_per_beta)]
    if config.sweep.include_ae:
        grid.append(("AE", 0.0, 0))
    return grid


def sweep(run: Run, only: Optional[Callable] = None) -> dict:
    images = run.read_dataset("train_erp").images
    panels = []
    for mode, beta, index in sweep_grid(run.config):
        if only is not None and not only(mode, beta, index):
            continue
        path = train_model(run, mode, beta, index, images)
        ck = formats.read_checkpoint(path)
        steps = [t["step"] for t in ck.trace]
        panels.append(plots.Panel(path.stem, {"recon": (steps, [t["recon"] for t in ck.trace]),
                                              "kl": (steps, [t["kl"] for t in ck.trace])},
                                  xlabel="step", ylabel="loss"))
    if panels:
        run.write_figure("trace", panels, columns=4)
    return dict(models=len(panels))


def rank(run: Run) -> dict:
    """UDR over the beta-VAE sweep; the top-scoring model is marked selected."""
    images = run.read_dataset("train_erp").images
    entries = [(model_file(run, m, b, i), i) for m, b, i in sweep_grid(run.config) if m == "BVAE"]
    cks = [run.read_checkpoint(p) for p, _ in entries]
    scores = udr.rank_models(cks, images)
    by_key = {(round(s.beta, 12), s.seed): s for s in scores}
    rows = []
    for (path, index), ck in zip(entries, cks):
        s = by_key[(round(ck.beta, 12), ck.seed)]
        rows.append([s.model_id, path.name, ck.beta, index, ck.seed, s.score, s.n_informative])
    best = max(range(len(rows)), key=lambda k: (rows[k][5], -k))
    run.write_csv("udr", ["model_id", "file", "beta", "seed_index", "seed", "udr", "informative", "selected"],
                  [r + [int(k == best)] for k, r in enumerate(rows)])
    series = {}
    for r in rows:
        x, y = series.setdefault(f"beta={r[2]:g}", ([], []))
        x.append(r[6])
        y.append(r[5])
    run.write_figure("udr_plot", [plots.Panel("UDR vs informative latents", series, "scatter",
                                              "informative latents", "UDR")], columns=1)
    return dict(selected=rows[best][1], selected_beta=rows[best][2], selected_udr=rows[best][5])


def selected_model(run: Run) -> Path:
    rows = read_csv(run.note_input(run.path("udr")))
    for r in rows:
        if r["selected"] == "1":
            return run.path(f"{PATHS['models']}/{r['file']}")
    raise ValueError(f"{run.path('udr')} marks no selected model")


def ae_model(run: Run) -> Path:
    return model_file(run, "AE", 0.0, 0)


# ---------------------------------------------------------------------------
# SCAN grounding, association and symbol samples
# ---------------------------------------------------------------------------


def scan_config(run: Run, component: str) -> scan.ScanConfig:
    s = run.config.scan
    return scan.ScanConfig(lr=s.lr, batch=s.batch, iterations=s.iterations, seed=run.seed(component),
                           mask_rate=s.mask_rate, balance_labels=s.balance_labels)


def _pairs(ds: Dataset, idx=None) -> list:
    labels = ds.label_vectors()
    idx = range(len(ds)) if idx is None else idx
    return [scan.GroundingPair(labels[i], ds.images[i]) for i in idx]


def lpp_window_gap(images: np.ndarray) -> float:
    """Mean positive-minus-neutral row difference over the LPP window."""
    images = np.asarray(images)
    return float((images[:, 3:, sigproc.LPP_WINDOW] - images[:, :3, sigproc.LPP_WINDOW]).mean())


def ground(run: Run, checkpoint: Optional[Path] = None) -> dict:
    """Full-data SCAN on the selected beta-VAE: factor association,
    sparsity and depression-symbol samples."""
    ds = run.read_dataset("train_erp")
    bvae = run.read_checkpoint(checkpoint or selected_model(run))
    sc = scan.train_scan(_pairs(ds), bvae, scan_config(run, "scan/full"))
    formats.write_checkpoint(run.path("scan_model"), sc)
    run.note_output(run.path("scan_model"))
    mat, sparsity = scan.factor_association(sc)
    run.write_csv("association", ["factor", "latent", "kl", "associated"],
                  [[f, d, mat[i, d], int(mat[i, d] > scan.KL_INFORMATIVE)]
                   for i, f in enumerate(FACTORS) for d in range(vae.LATENT_DIM)])
    count = run.config.scan.symbol_samples
    seed = run.seed("scan/symbols")
    gaps, panels = [], []
    t = np.arange(sigproc.EPOCH_LEN)
    for dep in (0, 1):
        ims = np.array(scan.sample_from_symbol(LabelVector(depression=dep), sc, bvae, count, seed=seed))
        gaps.append(["depression", dep, count, lpp_window_gap(ims) if count else float("nan")])
        if count:
            mean = ims.mean(axis=0)
            panels.append(plots.Panel(f"depression={dep}", {"neutral Pz": (t, mean[2]), "positive Pz": (t, mean[5])},
                                      xlabel="sample", ylabel="intensity"))
    run.write_csv("symbol_gaps", ["factor", "value", "samples", "lpp_gap"], gaps)
    if panels:
        run.write_figure("symbols", panels, columns=2)
    assoc = (mat > scan.KL_INFORMATIVE).sum(axis=1)
    return dict(sparsity=sparsity, associated_latents=dict(zip(FACTORS, assoc.tolist())),
                lpp_gap={str(g[1]): g[3] for g in gaps})


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def _lpp_matrix(run: Run, ids: np.ndarray) -> np.ndarray:
    rows = {int(r["participant_id"]): [float(r[k]) for k in ("lpp_fz", "lpp_cz", "lpp_pz")]
            for r in read_csv(run.note_input(run.path("lpp")))}
    return np.array([rows[int(i)] for i in ids])


def _smpl_index(erp: Dataset, smpl: Dataset) -> np.ndarray:
    """Row of the first SMPL record of every ERP participant."""
    first = {}
    for k, pid in enumerate(smpl.ids):
        first.setdefault(int(pid), k)
    return np.array([first[int(p)] for p in erp.ids])


def _cv_linear(X, y, folds, trainer, X_test=None):
    """Pooled fold predictions and scores; ``X_test`` swaps in a different
    test representation of the same participants."""
    X_test = X if X_test is None else X_test
    pred = np.empty_like(y)
    score = np.zeros(len(y))
    n = len(y)
    for test in folds:
        train = np.setdiff1d(np.arange(n), test)
        m = trainer(X[train], y[train])
        pred[test] = m.predict(X_test[test])
        if len(m.classes) == 2:
            score[test] = m.score(X_test[test])
    return pred, score


def _cv_scan(run: Run, ds: Dataset, ck, folds, tag: str, test_images=None):
    """Per fold SCAN on the training rows; predictions for all five factors
    on ERP test rows and, optionally, on another image set."""
    n = len(ds)
    pred = np.zeros((n, len(FACTORS)), dtype=int)
    pred_alt = np.zeros_like(pred)
    dep_prob = np.zeros(n)
    for k, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        sc = scan.train_scan(_pairs(ds, train), ck, scan_config(run, f"scan/cv/{tag}/{k}"))
        p, probs = scan.classify_batch(ds.images[test], ck, sc)
        pred[test] = p
        dep_prob[test] = probs[FACTORS.index("depression")][:, 1]
        if test_images is not None:
            pred_alt[test] = scan.classify_batch(test_images[test], ck, sc)[0]
    return pred, pred_alt, dep_prob


def classify(run: Run) -> dict:
    """Shared-split cross-validation of every representation on every factor."""
    cfg = run.config
    ds = run.read_dataset("train_erp")
    smpl = run.read_dataset("train_smpl")
    smpl_images = smpl.images[_smpl_index(ds, smpl)]
    labels = {f: ds.factor(i) for i, f in enumerate(FACTORS)}
    folds = ev.stratified_folds(labels["depression"], cfg.eval.folds, seed=run.seed("eval/folds"))
    fold_of = np.zeros(len(ds), dtype=int)
    for k, f in enumerate(folds):
        fold_of[f] = k
    run.write_csv("folds", ["participant_id", "fold"], zip(ds.ids.tolist(), fold_of.tolist()))

    bvae_path, ae_path = selected_model(run), ae_model(run)
    bvae, ae = run.read_checkpoint(bvae_path), run.read_checkpoint(ae_path)
    lr = ev.logreg_trainer(cfg.eval.reg, cfg.eval.strength)
    feats = {"LPP": _lpp_matrix(run, ds.ids),
             "bVAE": vae.encode_means(bvae, ds.images), "AE": vae.encode_means(ae, ds.images)}
    smpl_feats = {"bVAE": vae.encode_means(bvae, smpl_images), "AE": vae.encode_means(ae, smpl_images)}

    preds: dict = {}     # (representation, train source, test source) -> (n, 5) predictions
    scores = {}          # representation -> depression score for PR curves
    for name, trainer in (("LPP+LR", lr), ("LPP+LDA", ev.lda_trainer())):
        cols = [_cv_linear(feats["LPP"], labels[f], folds, trainer) for f in FACTORS]
        preds[(name, "ERP", "ERP")] = np.stack([c[0] for c in cols], axis=1)
        scores[name] = cols[FACTORS.index("depression")][1]
    for rep in ("bVAE", "AE"):
        cols = [_cv_linear(feats[rep], labels[f], folds, lr) for f in FACTORS]
        alt = [_cv_linear(feats[rep], labels[f], folds, lr, smpl_feats[rep])[0] for f in FACTORS]
        preds[(f"{rep}+LR", "ERP", "ERP")] = np.stack([c[0] for c in cols], axis=1)
        preds[(f"{rep}+LR", "ERP", "SMPL")] = np.stack(alt, axis=1)
        scores[f"{rep}+LR"] = cols[FACTORS.index("depression")][1]
    for rep, ck in (("bVAE", bvae), ("AE", ae)):
        p, p_alt, prob = _cv_scan(run, ds, ck, folds, rep, smpl_images)
        preds[(f"SCAN({rep})", "ERP", "ERP")] = p
        preds[(f"SCAN({rep})", "ERP", "SMPL")] = p_alt
        scores[f"SCAN({rep})"] = prob

    mc = cfg.eval.mc_samples
    rows, table = [], {}
    for (rep, src, dst), p in preds.items():
        for i, f in enumerate(FACTORS):
            cm = ev.ConfusionMatrix.from_predictions(labels[f], p[:, i], np.arange(BLOCKS[i]))
            post = ev.ba_posterior(cm, mc, seed=run.seed(f"eval/posterior/{rep}/{src}/{dst}/{f}"))
            ba = ev.balanced_accuracy(cm)
            table[(rep, src, dst, f)] = ba
            rows.append([rep, src, dst, f, ba, post.mean, post.lower, post.upper, cm.total])
    run.write_csv("classify", ["representation", "train_source", "test_source", "factor", "balanced_accuracy",
                               "posterior_mean", "ci_low", "ci_high", "n"], rows)

    # label-permutation null on the selected beta-VAE latents, same folds
    rng = np.random.default_rng(run.seed("eval/shuffle"))
    chance_rows = []
    for i, f in enumerate(FACTORS):
        bas = []
        for _ in range(cfg.eval.shuffles):
            y = rng.permutation(labels[f])
            p, _ = _cv_linear(feats["bVAE"], y, folds, lr)
            bas.append(ev.balanced_accuracy(ev.ConfusionMatrix.from_predictions(y, p, np.arange(BLOCKS[i]))))
        bas = np.array(bas)
        chance_rows.append(["bVAE+LR shuffled", "ERP", "ERP", f, bas.mean(), np.percentile(bas, 2.5),
                            np.percentile(bas, 97.5), cfg.eval.shuffles, 1.0 / BLOCKS[i]])
    run.write_csv("chance", ["representation", "train_source", "test_source", "factor", "mean",
                             "ci_low", "ci_high", "shuffles", "nominal"], chance_rows)

    dep = labels["depression"]
    panels = [plots.Panel("depression precision-recall",
                          {rep: tuple(np.array(ev.pr_curve(s, dep))[:, ::-1].T) for rep, s in scores.items()},
                          xlabel="recall", ylabel="precision")]
    run.write_figure("pr", panels, columns=1)
    key = lambda rep, f: table[(rep, "ERP", "ERP", f)]
    return dict(selected=bvae_path.name,
                depression={rep: key(rep, "depression") for rep in ("LPP+LR", "bVAE+LR", "SCAN(bVAE)", "SCAN(AE)")},
                age={rep: key(rep, "age") for rep in ("LPP+LR", "bVAE+LR")},
                chance={r[3]: r[4] for r in chance_rows})


# ---------------------------------------------------------------------------
# traversal and reconstruction
# ---------------------------------------------------------------------------


def traverse(run: Run, checkpoint: Optional[Path] = None) -> dict:
    """Latent traversals over [-2, 2] from one reference participant's ERP."""
    ds = run.read_dataset("train_erp")
    ck = run.read_checkpoint(checkpoint or selected_model(run))
    x = ds.images[REFERENCE_PARTICIPANT]
    kl, _ = vae.informative_latents(ck, ds.images)
    values = np.linspace(-2.0, 2.0, TRAVERSE_STEPS)
    t = np.arange(sigproc.EPOCH_LEN)
    panels, spread = [], []
    for d in range(vae.LATENT_DIM):
        ims = vae.traverse(ck, x, d, -2.0, 2.0, TRAVERSE_STEPS)
        series = {}
        for v, im in zip(values, ims):
            series[f"z={v:+.2f} positive Pz"] = (t, im[5])
            series[f"z={v:+.2f} neutral Pz"] = (t, im[2])
        panels.append(plots.Panel(f"latent {d} (KL {kl[d]:.3f})", series, xlabel="sample", ylabel="intensity"))
        spread.append(float(np.abs(ims[-1] - ims[0]).mean()))
    run.write_figure("traverse", panels, columns=5)
    return dict(model=Path(checkpoint or selected_model(run)).name, mean_abs_change=spread)


def reconstruct(run: Run, checkpoint: Optional[Path] = None, dataset: Optional[Path] = None,
                truth: Optional[Path] = None, erp: Optional[Path] = None) -> dict:
    """Per-record MSE of the SMPL input and of its reconstruction against the
    noise-free ERP image and the trial-averaged ERP image."""
    ck = run.read_checkpoint(checkpoint or selected_model(run))
    smpl = formats.read_dataset(run.note_input(Path(dataset) if dataset else run.path("heldout_smpl")))
    true = formats.read_dataset(run.note_input(Path(truth) if truth else run.path("heldout_true")))
    avg = formats.read_dataset(run.note_input(Path(erp) if erp else run.path("heldout_erp")))
    index = {int(p): k for k, p in enumerate(true.ids)}
    avg_index = {int(p): k for k, p in enumerate(avg.ids)}
    rows_idx = [k for k, p in enumerate(smpl.ids) if int(p) in index]
    if not rows_idx:
        raise ValueError("no SMPL record has a matching ground-truth ERP")
    x = smpl.images[rows_idx].astype(np.float64)
    rec = np.concatenate([vae.reconstruct(ck, x[i:i + 256]) for i in range(0, len(x), 256)]).astype(np.float64)
    tgt = true.images[[index[int(smpl.ids[k])] for k in rows_idx]].astype(np.float64)
    # the trial-averaged comparison is reported where the ERP set covers the participant
    ref = np.stack([avg.images[avg_index[int(smpl.ids[k])]] if int(smpl.ids[k]) in avg_index
                    else np.full(vae.IMAGE_SHAPE, np.nan) for k in rows_idx]).astype(np.float64)
    m_in, m_rec = ((x - tgt) ** 2).mean(axis=(1, 2)), ((rec - tgt) ** 2).mean(axis=(1, 2))
    a_in, a_rec = ((x - ref) ** 2).mean(axis=(1, 2)), ((rec - ref) ** 2).mean(axis=(1, 2))
    rows = [[int(smpl.ids[k]), m_in[j], m_rec[j], int(m_rec[j] < m_in[j]), a_in[j], a_rec[j]]
            for j, k in enumerate(rows_idx)]
    run.write_csv("reconstruct", ["participant_id", "mse_input_true", "mse_recon_true", "recon_closer",
                                  "mse_input_erp", "mse_recon_erp"], rows)
    t = np.arange(sigproc.EPOCH_LEN)
    panels = [plots.Panel(f"participant {int(smpl.ids[k])}",
                          {"SMPL input": (t, x[j, 5]), "reconstruction": (t, rec[j, 5]), "true ERP": (t, tgt[j, 5])},
                          xlabel="sample", ylabel="positive Pz")
              for j, k in enumerate(rows_idx[:3])]
    run.write_figure("recon_plot", panels, columns=3)
    return dict(records=len(rows), fraction_closer=float(np.mean(m_rec < m_in)))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def report(run: Run) -> dict:
    """Results table (representation x train source x test source x factor)
    and a summary of the headline numbers from every earlier step."""
    cls = read_csv(run.note_input(run.path("classify")))
    chance = read_csv(run.note_input(run.path("chance")))
    rows = [[r["representation"], r["train_source"], r["test_source"], r["factor"],
             float(r["posterior_mean"]), float(r["ci_low"]), float(r["ci_high"])] for r in cls]
    rows += [[r["representation"], r["train_source"], r["test_source"], r["factor"],
              float(r["mean"]), float(r["ci_low"]), float(r["ci_high"])] for r in chance]
    run.write_csv("results", ["representation", "train_source", "test_source", "factor", "mean",
                              "ci_low", "ci_high"], rows)
    reps = sorted({(r[0], r[1], r[2]) for r in rows})
    panels = []
    for f in FACTORS:
        series = {}
        for k, key in enumerate(reps):
            vals = [r for r in rows if (r[0], r[1], r[2]) == key and r[3] == f]
            if vals:
                series[f"{key[0]} {key[1]}->{key[2]}"] = ([k, k, k], [vals[0][5], vals[0][4], vals[0][6]])
        panels.append(plots.Panel(f, series, "scatter", "representation", "balanced accuracy"))
    run.write_figure("results_plot", panels, columns=5)

    point = {(r["representation"], r["train_source"], r["test_source"], r["factor"]): float(r["balanced_accuracy"])
             for r in cls}
    assoc = read_csv(run.note_input(run.path("association")))
    gaps = read_csv(run.note_input(run.path("symbol_gaps")))
    recon = read_csv(run.note_input(run.path("reconstruct")))
    udr_rows = read_csv(run.note_input(run.path("udr")))
    sel = next(r for r in udr_rows if r["selected"] == "1")
    summary = dict(
        selected_model=sel["file"], selected_beta=float(sel["beta"]), selected_udr=float(sel["udr"]),
        balanced_accuracy={f"{k[0]} {k[1]}->{k[2]} {k[3]}": v for k, v in point.items()},
        chance={r["factor"]: float(r["mean"]) for r in chance},
        depression_latents=sum(int(r["associated"]) for r in assoc if r["factor"] == "depression"),
        scan_sparsity=float(np.mean([r["associated"] == "0" for r in assoc])),
        lpp_gap={r["value"]: float(r["lpp_gap"]) for r in gaps},
        reconstruction_closer=float(np.mean([r["recon_closer"] == "1" for r in recon])),
    )
    p = run.path("summary")
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.note_output(p)
    return summary


STEPS = (("synth", synthesize), ("preprocess", preprocess), ("sweep", sweep), ("udr", rank),
         ("scan", ground), ("classify", classify), ("traverse", traverse), ("reconstruct", reconstruct),
         ("report", report))
