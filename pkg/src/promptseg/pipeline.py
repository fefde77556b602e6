"""The four-stage iterative scheme: partial-label simulation, initial
training, prompt -> generalist -> refine rounds, supervision merging, and
re-training.

Scans are independent within a round and rounds are a global barrier;
specialist fits are exclusive.  With phantom oracles the whole pipeline is a
pure function of (dataset, config, seed): per-scan randomness is keyed on
the scan id, all reports use fixed number formatting, and no timestamps are
written, so repeated runs produce byte-identical CSV and NIfTI outputs.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nifti_io
from .errors import (ConfigError, NoPredictionError, PromptsegError,
                     RejectedInputError)
from .metrics import ScanEvaluation, dice, evaluate_scan
from .oracles import (FileOracle, GeneralistOracle, PhantomGeneralist,
                      PhantomRegistry, PhantomSpecialist, SpecialistOracle,
                      TrainingExample, make_phantom_suite)
from .prompting import make_box_prompts
from .refinement import RefinementConfig, OrganRefinementState, refine_pseudo_label
from .vls_loss import SupervisionTarget, vls_mask
from .volgrid import LabelMap, Volume, argmax_labelmap, class_mask

log = logging.getLogger("promptseg.pipeline")

SUPERVISION_MODES = ("full", "partial")
ORACLE_KINDS = ("phantom", "file")


@dataclass
class ScanSupervision:
    """Per-scan partition of the foreground classes into labeled, unlabeled
    and pseudo-labeled sets, plus the merged supervision target and the
    per-organ refinement states."""

    scan_id: str
    num_classes: int
    labeled: frozenset[int]
    unlabeled: frozenset[int]
    target: SupervisionTarget
    pseudo: set[int] = field(default_factory=set)
    organ_states: dict[int, OrganRefinementState] = field(default_factory=dict)
    pseudo_conf: np.ndarray | None = None

    def __post_init__(self):
        every = frozenset(range(1, self.num_classes))
        if self.labeled | self.unlabeled != every or self.labeled & self.unlabeled:
            raise RejectedInputError(
                f"labeled/unlabeled must partition 1..{self.num_classes - 1}")
        if not set(self.pseudo) <= self.unlabeled:
            raise RejectedInputError("pseudo classes must be a subset of the unlabeled set")
        for c in self.unlabeled:
            self.organ_states.setdefault(c, OrganRefinementState(class_id=c))

    def state(self, class_id: int) -> OrganRefinementState:
        return self.organ_states[class_id]


@dataclass
class Scan:
    scan_id: str
    volume: Volume
    supervision: ScanSupervision
    gt: LabelMap | None = None  # held for evaluation only, never for training


@dataclass
class PipelineConfig:
    # loop shape
    rounds: int = 4
    entropy_gate_from_round: int = 2
    supervision: str = "partial"   # base loss semantics: "full" | "partial"
    use_vls: bool = True
    keep_fraction: float = 0.67
    seed: int = 0
    # prompting / refinement
    box_padding: int = 6
    tau_cls: float = 0.4
    delta_roi: int = 3
    # oracle selection
    oracle: str = "phantom"
    specialist_exchange: str | None = None
    generalist_exchange: str | None = None
    oracle_timeout: float = 60.0
    # phantom suite
    scans: int = 20
    test_scans: int = 5
    organs: int = 6
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    generalist_cooperativeness: float = 0.9
    specialist_contradiction_weight: float = 0.5
    # data (file-oracle mode)
    data_dir: str | None = None
    # outputs
    out_dir: str = "runs/latest"
    hd95_missing_policy: str = "exclude"

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.rounds >= 1 and not 1 <= self.entropy_gate_from_round <= self.rounds:
            raise ConfigError("entropy_gate_from_round must lie in [1, rounds]")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must lie in (0, 1]")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.oracle not in ORACLE_KINDS:
            raise ConfigError(f"oracle must be one of {ORACLE_KINDS}")
        if self.scans < 1 or self.organs < 1 or self.test_scans < 0:
            raise ConfigError("scans must be >= 1, organs >= 1, test_scans >= 0")
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)

    def refinement_config(self, round_t: int) -> RefinementConfig:
        return RefinementConfig(
            tau_cls=self.tau_cls,
            delta_roi=self.delta_roi,
            entropy_gate_active=round_t >= self.entropy_gate_from_round,
        )


_BOOL_VALUES = {"true": True, "yes": True, "1": True,
                "false": False, "no": False, "0": False}


def _parse_value(name: str, kind, raw: str):
    if kind is bool:
        try:
            return _BOOL_VALUES[raw.lower()]
        except KeyError:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}") from None
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(float(v) if "." in v else int(v) for v in raw.split(","))
    return raw


def load_config(path) -> PipelineConfig:
    """Parse a key=value config file (``#`` starts a comment line)."""
    known = {f.name: f for f in fields(PipelineConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        f = known[key]
        kind = {"rounds": int, "entropy_gate_from_round": int, "seed": int,
                "box_padding": int, "delta_roi": int, "scans": int,
                "test_scans": int, "organs": int,
                "use_vls": bool,
                "keep_fraction": float, "tau_cls": float, "oracle_timeout": float,
                "generalist_cooperativeness": float,
                "specialist_contradiction_weight": float,
                "dims": tuple, "spacing": tuple}.get(f.name, str)
        values[key] = _parse_value(key, kind, value)
    return PipelineConfig(**values)


def config_lines(config: PipelineConfig) -> list[str]:
    """The config echoed back in the documented key=value form."""
    lines = []
    for f in fields(PipelineConfig):
        value = getattr(config, f.name)
        if value is None:
            continue
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return lines


# --- stage 1: partial-label simulation ---------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def simulate_partial_labels(gt: LabelMap, num_classes: int, keep_fraction: float,
                            seed: int, scan_id: str = "scan") -> ScanSupervision:
    """Randomly keep ``round(keep_fraction * (C-1))`` organ annotations.

    Sampling is uniform without replacement and deterministic per
    (scan_id, seed); voxels of removed organs are relabeled to background in
    the supervision target.  Rounding is half-up.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if gt.num_classes != num_classes:
        raise RejectedInputError(f"gt has {gt.num_classes} classes, expected {num_classes}")
    n_organs = num_classes - 1
    n_keep = _round_half_up(keep_fraction * n_organs)
    if n_keep == 0:
        raise ConfigError(
            f"keep_fraction {keep_fraction} keeps 0 of {n_organs} organs: no supervision")
    rng = np.random.default_rng((seed, zlib.crc32(scan_id.encode())))
    labeled = frozenset(int(c) for c in rng.choice(np.arange(1, num_classes),
                                                   size=n_keep, replace=False))
    unlabeled = frozenset(range(1, num_classes)) - labeled
    data = np.array(gt.data)
    if unlabeled:
        data[np.isin(data, sorted(unlabeled))] = 0
    target = SupervisionTarget(LabelMap(data, num_classes), frozenset())
    return ScanSupervision(scan_id=scan_id, num_classes=num_classes,
                           labeled=labeled, unlabeled=unlabeled, target=target)


# --- stage 2: initial training ------------------------------------------------

def _training_examples(scans: list[Scan], specialist: SpecialistOracle | None,
                       use_vls: bool) -> list[TrainingExample]:
    examples = []
    for scan in scans:
        mask = None
        if use_vls and specialist is not None:
            mask = vls_mask(specialist.predict(scan.volume), scan.supervision.target)
        examples.append(TrainingExample(
            volume=scan.volume,
            target=scan.supervision.target,
            labeled_classes=scan.supervision.labeled,
            weight_mask=mask,
        ))
    return examples


def initial_training(scans: list[Scan], specialist: SpecialistOracle,
                     supervision: str = "partial") -> None:
    """Fit the specialist on the as-given partial annotations (no pseudo-labels
    yet).  "full" treats unannotated organs as background; "partial" trains
    per-organ channels for the labeled classes only."""
    if not scans:
        raise ConfigError("initial training requires at least one scan")
    for scan in scans:
        if not scan.supervision.labeled:
            raise ConfigError(f"{scan.scan_id}: no labeled organs")
    specialist.fit(_training_examples(scans, None, False), supervision=supervision)


# --- stage 3: pseudo-label generation + refinement ----------------------------

@dataclass(frozen=True)
class RoundEntry:
    scan_id: str
    class_id: int
    decision: str          # "accept" | "reject" | "skip"
    reason: str
    mean_entropy: float | None
    pseudo_dice: float | None


@dataclass
class RoundReport:
    round_index: int
    entries: list[RoundEntry] = field(default_factory=list)

    def accepted(self) -> list[RoundEntry]:
        return [e for e in self.entries if e.decision == "accept"]


def _merge_pseudo_label(sup: ScanSupervision, class_id: int, mask: np.ndarray,
                        conf_field: np.ndarray) -> None:
    """Write an accepted pseudo-label into the supervision target.

    Ground-truth voxels are never overwritten: writes are restricted to
    voxels currently background or claimed by another pseudo-label, and
    contested pseudo voxels go to the higher generalist probability (ties to
    the lower class index).
    """
    labels = np.array(sup.target.labels.data)
    if sup.pseudo_conf is None:
        sup.pseudo_conf = np.zeros(labels.shape, dtype=np.float32)
    conf = sup.pseudo_conf
    prev = labels == class_id
    if prev.any():
        labels[prev] = 0
        conf[prev] = 0.0
    background = mask & (labels == 0)
    labels[background] = class_id
    conf[background] = conf_field[background]
    others = sorted(sup.pseudo - {class_id})
    if others:
        contested = mask & np.isin(labels, others)
        win = contested & ((conf_field > conf)
                           | ((conf_field == conf) & (class_id < labels)))
        labels[win] = class_id
        conf[win] = conf_field[win]
    sup.pseudo.add(class_id)
    sup.target = SupervisionTarget(LabelMap(labels, sup.num_classes),
                                   frozenset(sup.pseudo))


def pseudo_label_round(scans: list[Scan], specialist: SpecialistOracle,
                       generalist: GeneralistOracle, config: PipelineConfig,
                       round_t: int) -> RoundReport:
    """One prompt -> segment -> refine pass over every unlabeled organ.

    Candidates are regenerated from scratch each round; the entropy gate
    (active from ``entropy_gate_from_round``) decides whether the stored
    pseudo-label is replaced.  Per-organ oracle failures skip that organ and
    never abort the round.
    """
    report = RoundReport(round_index=round_t)
    for scan in scans:
        sup = scan.supervision
        pred = argmax_labelmap(specialist.predict(scan.volume))
        for class_id in sorted(sup.unlabeled):
            try:
                prompts = make_box_prompts(pred, class_id, config.box_padding)
            except NoPredictionError:
                report.entries.append(RoundEntry(scan.scan_id, class_id,
                                                 "skip", "no-prediction", None, None))
                continue
            try:
                candidate, gprobs = generalist.segment(scan.volume, prompts)
            except PromptsegError as exc:
                log.warning("%s organ %d: generalist failed: %s", scan.scan_id, class_id, exc)
                report.entries.append(RoundEntry(scan.scan_id, class_id,
                                                 "skip", "oracle-error", None, None))
                continue
            result = refine_pseudo_label(candidate, gprobs, prompts,
                                         config.refinement_config(round_t),
                                         sup.state(class_id))
            if result.accepted:
                _merge_pseudo_label(sup, class_id, result.mask, gprobs.class_probs(1))
                pdice = (dice(result.mask, class_mask(scan.gt, class_id))
                         if scan.gt is not None else None)
                report.entries.append(RoundEntry(scan.scan_id, class_id,
                                                 "accept", "accepted",
                                                 result.mean_entropy, pdice))
            else:
                report.entries.append(RoundEntry(scan.scan_id, class_id,
                                                 "reject", result.reason,
                                                 result.mean_entropy, None))
    return report


# --- stage 4: re-training ------------------------------------------------------

def retrain(scans: list[Scan], specialist: SpecialistOracle, use_vls: bool,
            supervision: str = "partial") -> None:
    """Fit the specialist on the merged (ground truth + pseudo) targets.

    With VLS enabled, a selection mask computed from the specialist's
    *current* predictions accompanies each target; the phantom specialist
    weights its quality update by it and the file oracle ships it as an
    extra NIfTI.
    """
    if not any(scan.supervision.labeled or scan.supervision.pseudo for scan in scans):
        raise ConfigError("retraining requires at least one supervised scan")
    specialist.fit(_training_examples(scans, specialist, use_vls),
                   supervision=supervision)


# --- full pipeline -------------------------------------------------------------

@dataclass
class RunResult:
    out_dir: Path
    mean_dsc: float | None
    mean_hd95: float | None
    round_reports: list[RoundReport]
    evaluations: dict[str, ScanEvaluation]


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _write_round_csv(path: Path, report: RoundReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "scan_id", "class_id", "decision", "reason",
                         "mean_entropy", "pseudo_dice"])
        for e in report.entries:
            writer.writerow([report.round_index, e.scan_id, e.class_id, e.decision,
                             e.reason, _fmt(e.mean_entropy), _fmt(e.pseudo_dice)])


def _write_eval_csv(path: Path, evaluations: dict[str, ScanEvaluation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scan_id", "class_id", "dsc", "hd95"])
        for scan_id in sorted(evaluations):
            for cm in evaluations[scan_id].per_class:
                writer.writerow([scan_id, cm.class_id, _fmt(cm.dsc), _fmt(cm.hd95)])


def _write_summary_csv(path: Path, evaluations: dict[str, ScanEvaluation]) -> None:
    by_class: dict[int, list] = {}
    for ev in evaluations.values():
        for cm in ev.per_class:
            by_class.setdefault(cm.class_id, []).append(cm)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id", "mean_dsc", "mean_hd95", "scans"])
        all_dsc, all_hd = [], []
        for cid in sorted(by_class):
            dscs = [cm.dsc for cm in by_class[cid]]
            hds = [cm.hd95 for cm in by_class[cid] if cm.hd95 is not None]
            all_dsc.extend(dscs)
            all_hd.extend(hds)
            writer.writerow([cid, _fmt(float(np.mean(dscs))),
                             _fmt(float(np.mean(hds)) if hds else None), len(dscs)])
        writer.writerow(["overall", _fmt(float(np.mean(all_dsc)) if all_dsc else None),
                         _fmt(float(np.mean(all_hd)) if all_hd else None), len(all_dsc)])


def _status_manifest(sup: ScanSupervision) -> nifti_io.ScanManifest:
    man = nifti_io.ScanManifest()
    for c in range(1, sup.num_classes):
        if c in sup.labeled:
            man.statuses[c] = "labeled"
        elif c in sup.pseudo:
            man.statuses[c] = "pseudo"
        else:
            man.statuses[c] = "unlabeled"
    return man


def _build_phantom_dataset(config: PipelineConfig):
    suite = make_phantom_suite(config.scans + config.test_scans, config.organs,
                               config.dims, seed=config.seed)
    registry = PhantomRegistry()
    train, test = [], []
    num_classes = config.organs + 1
    for idx, (scan_id, vol, gt) in enumerate(suite):
        registry.register(vol, gt)
        if idx < config.scans:
            sup = simulate_partial_labels(gt, num_classes, config.keep_fraction,
                                          config.seed, scan_id)
            train.append(Scan(scan_id, vol, sup, gt=gt))
        else:
            test.append((scan_id, vol, gt))
    specialist = PhantomSpecialist(
        registry,
        contradiction_weight=config.specialist_contradiction_weight,
        seed=config.seed)
    generalist = PhantomGeneralist(
        registry,
        cooperativeness=config.generalist_cooperativeness,
        assumed_padding=config.box_padding,
        seed=config.seed)
    return train, test, specialist, generalist


def _load_file_dataset(config: PipelineConfig):
    if not config.data_dir:
        raise ConfigError("file oracle mode requires data_dir")
    root = Path(config.data_dir)
    train, test = [], []
    for man_path in sorted(root.glob("*.manifest")):
        scan_id = man_path.stem
        man = nifti_io.read_manifest(man_path)
        vol = nifti_io.read_volume(root / f"{scan_id}.nii")
        labels = nifti_io.read_volume(root / f"{scan_id}.labels.nii")
        if not isinstance(vol, Volume) or not isinstance(labels, LabelMap):
            raise ConfigError(f"{scan_id}: expected float32 image and uint8 labels")
        num_classes = max(man.num_classes, labels.num_classes)
        labels = LabelMap(np.array(labels.data), num_classes)
        gt_path = root / f"{scan_id}.gt.nii"
        gt = None
        if gt_path.exists():
            gt_img = nifti_io.read_volume(gt_path)
            if isinstance(gt_img, LabelMap):
                gt = LabelMap(np.array(gt_img.data), num_classes)
        labeled = man.classes_with_status("labeled")
        pseudo = man.classes_with_status("pseudo")
        unlabeled = frozenset(range(1, num_classes)) - labeled
        sup = ScanSupervision(scan_id=scan_id, num_classes=num_classes,
                              labeled=labeled, unlabeled=unlabeled,
                              target=SupervisionTarget(labels, pseudo),
                              pseudo=set(pseudo))
        scan = Scan(scan_id, vol, sup, gt=gt)
        train.append(scan)
        if gt is not None:
            test.append((scan_id, vol, gt))
    if not train:
        raise ConfigError(f"no *.manifest scans found under {root}")
    specialist = FileOracle(config.specialist_exchange, timeout=config.oracle_timeout)
    generalist = FileOracle(config.generalist_exchange, timeout=config.oracle_timeout)
    return train, test, specialist, generalist


def _input_hash(train, test) -> str:
    h = hashlib.sha256()
    for scan in train:
        h.update(scan.scan_id.encode())
        h.update(scan.volume.data.tobytes())
        h.update(scan.supervision.target.labels.data.tobytes())
    for scan_id, vol, gt in test:
        h.update(scan_id.encode())
        h.update(vol.data.tobytes())
        h.update(gt.data.tobytes())
    return h.hexdigest()


def run_pipeline(config: PipelineConfig) -> RunResult:
    """Execute stage 1 then (2 -> 3 -> 4) x rounds, then the final evaluation.

    Writes round_<t>.csv, final_eval.csv, final_summary.csv, per-scan target
    NIfTIs + manifests, and a run manifest under ``config.out_dir``; partial
    artifacts stay on disk if an oracle fails mid-run.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.oracle == "phantom":
        train, test, specialist, generalist = _build_phantom_dataset(config)
    else:
        train, test, specialist, generalist = _load_file_dataset(config)
    manifest_lines = ["# promptseg run manifest", *config_lines(config),
                      f"input_hash={_input_hash(train, test)}"]
    (out / "run_manifest.txt").write_text("\n".join(manifest_lines) + "\n")

    log.info("initial training on %d scans (%s supervision)", len(train), config.supervision)
    initial_training(train, specialist, supervision=config.supervision)
    reports: list[RoundReport] = []
    for round_t in range(1, config.rounds + 1):
        report = pseudo_label_round(train, specialist, generalist, config, round_t)
        reports.append(report)
        _write_round_csv(out / f"round_{round_t}.csv", report)
        n_accept = len(report.accepted())
        log.info("round %d: %d/%d organ updates accepted", round_t, n_accept,
                 len(report.entries))
        retrain(train, specialist, use_vls=config.use_vls,
                supervision=config.supervision)

    targets_dir = out / "targets"
    targets_dir.mkdir(exist_ok=True)
    for scan in train:
        nifti_io.write_volume(targets_dir / f"{scan.scan_id}.labels.nii",
                              scan.supervision.target.labels,
                              spacing=config.spacing)
        nifti_io.write_manifest(targets_dir / f"{scan.scan_id}.manifest",
                                _status_manifest(scan.supervision))

    evaluations: dict[str, ScanEvaluation] = {}
    for scan_id, vol, gt in test:
        pred = argmax_labelmap(specialist.predict(vol))
        evaluations[scan_id] = evaluate_scan(pred, gt, config.spacing,
                                             hd95_missing=config.hd95_missing_policy)
    mean_dsc = mean_hd95 = None
    if evaluations:
        _write_eval_csv(out / "final_eval.csv", evaluations)
        _write_summary_csv(out / "final_summary.csv", evaluations)
        dscs = [cm.dsc for ev in evaluations.values() for cm in ev.per_class]
        hds = [cm.hd95 for ev in evaluations.values() for cm in ev.per_class
               if cm.hd95 is not None]
        mean_dsc = float(np.mean(dscs))
        mean_hd95 = float(np.mean(hds)) if hds else None
        log.info("final evaluation: mean DSC %.4f over %d scans", mean_dsc, len(evaluations))
    return RunResult(out_dir=out, mean_dsc=mean_dsc, mean_hd95=mean_hd95,
                     round_reports=reports, evaluations=evaluations)
