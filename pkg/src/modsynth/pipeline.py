"""Pipeline stages behind the CLI subcommands.

Stage outputs land under the configured output directory:

    pre/       preprocessed template and subjects
    model/     training set, provenance, bins, trained model, loss log
    synth/     synthesized template-contrast volumes
    register/  per-(subject, mode, cost) affine, trace, result sidecar
    reports/   long-format landmark errors and per-method summaries
    phantom/   generated phantom suites

Registration orientation: the preprocessed (or synthesized) subject-space
image is the fixed image and the template is the moving image, so the
recovered transform maps subject space to template space and is applied to
moving landmarks directly during evaluation.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import replace

import numpy as np

from ._ioutil import atomic_write_text
from .config import PipelineConfig
from .ensemble import (
    KIND_BDT,
    train_boosted_trees,
    train_random_forest,
    load_model,
    save_model,
)
from .errors import ConfigError
from .evaluation import (
    ErrorSummary,
    emit_report,
    landmark_error,
    summarize,
)
from .landmarks import read_landmarks_csv, write_landmarks_csv
from .phantom import PhantomParams, generate_suite, save_params
from .registration import (
    RegistrationResult,
    load_affine_text,
    load_field,
    register_affine,
    register_deformable,
    save_affine_text,
    save_cost_trace,
    save_field,
)
from .synth import (
    compute_bins_from_values,
    load_bins,
    make_label_volume,
    make_training_pair,
    save_bins,
    synthesize,
)
from .features import sample_training, save_training_set
from .volume import preprocess
from .volume_io import load_volume, save_volume

MODE_BASELINE = "baseline"
MODE_SYNTH = "synth"


def apply_seed_override(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    cfg.seed = seed
    cfg.rf_params = replace(cfg.rf_params, seed=seed)
    cfg.bdt_params = replace(cfg.bdt_params, seed=seed)
    cfg.phantom.seed = seed
    return cfg


def _outdir(cfg: PipelineConfig, *parts: str) -> str:
    path = os.path.join(cfg.output_dir, *parts)
    os.makedirs(path, exist_ok=True)
    return path


def _pre_path(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(_outdir(cfg, "pre"), f"{name}.nrrd")


def _check_inputs(cfg: PipelineConfig, ids: list[str]) -> None:
    missing = []
    if not cfg.template_path or not os.path.exists(cfg.template_path):
        missing.append(cfg.template_path or "<template unset>")
    for sid in ids:
        p = cfg.subject_paths.get(sid)
        if not p or not os.path.exists(p):
            missing.append(p or f"<subject {sid} unset>")
    if missing:
        raise ConfigError(f"missing input volumes: {missing}")


def _select_subjects(cfg: PipelineConfig, subject: str | None) -> list[str]:
    if subject is None:
        return cfg.subject_ids
    if subject not in cfg.subject_paths:
        raise ConfigError(f"unknown subject {subject!r}; have {cfg.subject_ids}")
    return [subject]


def cmd_preprocess(cfg: PipelineConfig, subject: str | None = None) -> list[str]:
    ids = _select_subjects(cfg, subject)
    _check_inputs(cfg, ids)
    written = []
    template = preprocess(load_volume(cfg.template_path), cfg.preprocess)
    out = _pre_path(cfg, "template")
    save_volume(template, out)
    written.append(out)
    for sid in ids:
        vol = preprocess(load_volume(cfg.subject_paths[sid]), cfg.preprocess)
        out = _pre_path(cfg, sid)
        save_volume(vol, out)
        written.append(out)
    return written


def _require_landmarks(cfg: PipelineConfig, ids) -> dict[str, str]:
    missing = [sid for sid in ids if sid not in cfg.landmark_paths]
    if missing:
        raise ConfigError(f"no landmark files configured for subjects: {missing}")
    gone = [cfg.landmark_paths[sid] for sid in ids
            if not os.path.exists(cfg.landmark_paths[sid])]
    if gone:
        raise ConfigError(f"landmark files not found: {gone}")
    return {sid: cfg.landmark_paths[sid] for sid in ids}


def cmd_train(cfg: PipelineConfig) -> dict[str, str]:
    ids = list(cfg.training_subjects)
    if not ids:
        raise ConfigError("no training subjects configured")
    lm_paths = _require_landmarks(cfg, ids)

    template = load_volume(_pre_path(cfg, "template"))
    pairs = []
    pooled = []
    for sid in ids:
        subject = load_volume(_pre_path(cfg, sid))
        lms = read_landmarks_csv(lm_paths[sid])
        subj, pulled, mask = make_training_pair(
            subject, template, lms, cfg.foreground_threshold
        )
        pairs.append((subj, pulled, mask))
        pooled.append(pulled.data[mask.data > 0.5])
    bins = compute_bins_from_values(np.concatenate(pooled))

    label_pairs = []
    for subj, pulled, mask in pairs:
        labels = make_label_volume(pulled, bins, mask)
        label_pairs.append((subj, labels, mask))
    ts = sample_training(
        label_pairs, cfg.n_samples, cfg.feature_spec, cfg.seed, subject_ids=ids
    )

    model_dir = _outdir(cfg, "model")
    outputs = {}
    ts_path = os.path.join(model_dir, "training.bin")
    save_training_set(ts, ts_path)
    outputs["training_set"] = ts_path

    prov_path = os.path.join(model_dir, "provenance.csv")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject", "voxel"])
    for sid, vox in ts.provenance:
        writer.writerow([sid, vox])
    atomic_write_text(prov_path, buf.getvalue())
    outputs["provenance"] = prov_path

    bins_path = os.path.join(model_dir, "bins.json")
    save_bins(bins, bins_path)
    outputs["bins"] = bins_path

    if cfg.learner == KIND_BDT:
        model = train_boosted_trees(ts, cfg.bdt_params)
        loss_path = os.path.join(model_dir, "bdt_loss.csv")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "iteration", "loss"])
        for k in range(model.loss_trace.shape[0]):
            for it in range(model.loss_trace.shape[1]):
                writer.writerow([k, it, repr(float(model.loss_trace[k, it]))])
        atomic_write_text(loss_path, buf.getvalue())
        outputs["loss_log"] = loss_path
    else:
        model = train_random_forest(ts, cfg.rf_params)
    model_path = os.path.join(model_dir, "model.bin")
    save_model(model, model_path)
    outputs["model"] = model_path
    return outputs


def cmd_synth(cfg: PipelineConfig, subject: str | None = None) -> list[str]:
    ids = _select_subjects(cfg, subject)
    model = load_model(os.path.join(cfg.output_dir, "model", "model.bin"))
    bins = load_bins(os.path.join(cfg.output_dir, "model", "bins.json"))
    written = []
    for sid in ids:
        vol = load_volume(_pre_path(cfg, sid))
        out_vol = synthesize(vol, model, cfg.feature_spec, bins)
        out = os.path.join(_outdir(cfg, "synth"), f"{sid}.nrrd")
        save_volume(out_vol, out)
        written.append(out)
    return written


def _register_tag(sid: str, mode: str, cost_kind: str) -> str:
    return f"{sid}.{mode}.{cost_kind}"


def cmd_register(
    cfg: PipelineConfig, subject: str | None = None, mode: str = MODE_BASELINE
) -> list[str]:
    if mode not in (MODE_BASELINE, MODE_SYNTH):
        raise ConfigError(f"mode must be baseline or synth, got {mode!r}")
    ids = _select_subjects(cfg, subject)
    moving = load_volume(_pre_path(cfg, "template"))
    tags = []
    for sid in ids:
        if mode == MODE_BASELINE:
            fixed = load_volume(_pre_path(cfg, sid))
        else:
            fixed = load_volume(os.path.join(cfg.output_dir, "synth", f"{sid}.nrrd"))
        result = register_affine(fixed, moving, cfg.cost, cfg.registration)
        if cfg.registration.deformable.enabled and not result.failed:
            result = register_deformable(
                fixed, moving, cfg.cost, cfg.registration, result
            )
        tag = _register_tag(sid, mode, cfg.cost.kind)
        _save_result(cfg, tag, result)
        tags.append(tag)
    return tags


def _save_result(cfg: PipelineConfig, tag: str, result: RegistrationResult) -> None:
    reg_dir = _outdir(cfg, "register")
    save_affine_text(result.affine, os.path.join(reg_dir, f"{tag}.affine.txt"))
    save_cost_trace(result.cost_trace, os.path.join(reg_dir, f"{tag}.trace.csv"))
    if result.field is not None:
        save_field(result.field, os.path.join(reg_dir, f"{tag}.field"))
    sidecar = {
        "failed": result.failed,
        "failure_reason": result.failure_reason,
        "final_cost": result.final_cost,
        "has_field": result.field is not None,
        "options": result.options,
    }
    atomic_write_text(
        os.path.join(reg_dir, f"{tag}.result.json"),
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n",
    )


def _load_result(cfg: PipelineConfig, tag: str) -> RegistrationResult:
    reg_dir = os.path.join(cfg.output_dir, "register")
    with open(os.path.join(reg_dir, f"{tag}.result.json"), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    affine = load_affine_text(os.path.join(reg_dir, f"{tag}.affine.txt"))
    field = None
    if sidecar.get("has_field"):
        field = load_field(os.path.join(reg_dir, f"{tag}.field"))
    return RegistrationResult(
        affine=affine,
        final_cost=sidecar["final_cost"],
        cost_trace=[],
        failed=sidecar["failed"],
        failure_reason=sidecar["failure_reason"],
        field=field,
        options=sidecar.get("options", {}),
    )


def cmd_evaluate(
    cfg: PipelineConfig, subject: str | None = None, mode: str | None = None
) -> tuple[str, str]:
    ids = _select_subjects(cfg, subject)
    lm_paths = _require_landmarks(cfg, [s for s in ids if s in cfg.landmark_paths])
    reg_dir = os.path.join(cfg.output_dir, "register")
    if not os.path.isdir(reg_dir):
        raise ConfigError(f"no registration outputs under {reg_dir}")

    records = []
    summaries = []
    for name in sorted(os.listdir(reg_dir)):
        if not name.endswith(".result.json"):
            continue
        tag = name[: -len(".result.json")]
        sid, tag_mode, cost_kind = tag.split(".")
        if sid not in lm_paths:
            continue
        if mode is not None and tag_mode != mode:
            continue
        method = f"{tag_mode}-{cost_kind}"
        result = _load_result(cfg, tag)
        if result.failed:
            summaries.append((sid, method, ErrorSummary.for_failure()))
            continue
        lms = read_landmarks_csv(lm_paths[sid])
        recs = landmark_error(result.transform(), lms, subject_id=sid, method=method)
        records.extend(recs)
        summaries.append((sid, method, summarize(recs)))

    report_dir = _outdir(cfg, "reports")
    errors_path = os.path.join(report_dir, "errors.csv")
    summary_path = os.path.join(report_dir, "errors_summary.csv")
    emit_report(records, summaries, errors_path, summary_path)
    return errors_path, summary_path


def cmd_phantom(cfg: PipelineConfig) -> list[str]:
    ph = cfg.phantom
    if len(ph.gammas) != ph.n_pairs:
        raise ConfigError(
            f"phantom n_pairs {ph.n_pairs} != number of gammas {len(ph.gammas)}"
        )
    base = PhantomParams(
        seed=ph.seed,
        n_blobs=ph.n_blobs,
        warp_magnitude_um=ph.warp_magnitude_um,
        noise_sigma=ph.noise_sigma,
        n_landmarks=ph.n_landmarks,
    )
    out_dir = _outdir(cfg, "phantom")
    written = []
    suite = generate_suite(base, list(ph.gammas))
    save_volume(suite[0][1].template, os.path.join(out_dir, "template.nrrd"))
    written.append(os.path.join(out_dir, "template.nrrd"))
    for i, (params, pair) in enumerate(suite):
        sid = f"p{i}"
        save_volume(pair.subject, os.path.join(out_dir, f"{sid}.nrrd"))
        write_landmarks_csv(pair.landmarks, os.path.join(out_dir, f"{sid}_landmarks.csv"))
        save_volume(
            pair.true_label_volume, os.path.join(out_dir, f"{sid}_labels.nrrd")
        )
        save_params(params, os.path.join(out_dir, f"{sid}_params.json"))
        written.extend([
            os.path.join(out_dir, f"{sid}.nrrd"),
            os.path.join(out_dir, f"{sid}_landmarks.csv"),
        ])
    return written
