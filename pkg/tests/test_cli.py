import numpy as np

from promptseg import nifti_io
from promptseg.cli import main
from promptseg.volgrid import LabelMap, ProbVolume, Volume, mask_to_labels


def sphere_mask(dims, center, radius):
    yy, xx, zz = np.indices(dims)
    return ((yy - center[0]) ** 2 + (xx - center[1]) ** 2
            + (zz - center[2]) ** 2) <= radius ** 2


def test_phantom_gen_and_metrics_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["phantom-gen", "--out", str(data), "--scans", "2",
                 "--organs", "3", "--dims", "20,20,20", "--seed", "4"]) == 0
    files = sorted(p.name for p in data.iterdir())
    assert "scan000.nii" in files and "scan000.gt.nii" in files
    assert "scan000.manifest" in files
    csv_path = tmp_path / "m.csv"
    assert main(["metrics", "--pred", str(data / "scan000.gt.nii"),
                 "--gt", str(data / "scan000.gt.nii"),
                 "--manifest", str(data / "scan000.manifest"),
                 "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out
    assert "mean" in out and "1.0000" in out
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "class,dsc,hd95"
    assert lines[1].startswith("1,1.000000,0.000000")


def test_metrics_dim_mismatch_exits_nonzero(tmp_path, capsys):
    a = tmp_path / "a.nii"
    b = tmp_path / "b.nii"
    nifti_io.write_volume(a, LabelMap(np.zeros((4, 4, 4), dtype=np.uint8), 2))
    nifti_io.write_volume(b, LabelMap(np.zeros((4, 4, 5), dtype=np.uint8), 2))
    assert main(["metrics", "--pred", str(a), "--gt", str(b)]) == 1
    assert "error:" in capsys.readouterr().err


def test_simulate_partial_subcommand(tmp_path, capsys):
    gt_data = np.random.default_rng(0).integers(0, 16, size=(6, 6, 6)).astype(np.uint8)
    gt_path = tmp_path / "gt.nii"
    nifti_io.write_volume(gt_path, LabelMap(gt_data, 16))
    out_labels = tmp_path / "partial.nii"
    out_man = tmp_path / "partial.manifest"
    assert main(["simulate-partial", "--gt", str(gt_path), "--keep-fraction", "0.67",
                 "--seed", "1", "--scan-id", "s0", "--classes", "16",
                 "--out-labels", str(out_labels), "--out-manifest", str(out_man)]) == 0
    assert "kept 10/15 organs" in capsys.readouterr().out
    man = nifti_io.read_manifest(out_man)
    assert len(man.classes_with_status("labeled")) == 10
    assert len(man.classes_with_status("unlabeled")) == 5


def test_prompt_refine_and_vls_subcommands(tmp_path, capsys):
    dims = (40, 40, 40)
    organ = sphere_mask(dims, (20, 20, 20), 5)
    pred_path = tmp_path / "pred.nii"
    nifti_io.write_volume(pred_path, mask_to_labels(organ))
    prompts_path = tmp_path / "organ.prompts"
    assert main(["prompt", "--pred", str(pred_path), "--class-id", "1",
                 "--padding", "6", "--out", str(prompts_path)]) == 0
    lines = prompts_path.read_text().splitlines()
    assert lines[0].startswith("axial 20 ") and lines[1].startswith("sagittal 20 ")

    blob = sphere_mask(dims, (2, 37, 37), 2)  # far outside the prompt ROI
    candidate = organ | blob
    p_fg = np.where(candidate, np.float32(0.95), np.float32(0.05))
    probs = ProbVolume(np.stack([1.0 - p_fg, p_fg]))
    cand_path = tmp_path / "cand.nii"
    probs_path = tmp_path / "probs.nii"
    nifti_io.write_volume(cand_path, mask_to_labels(candidate))
    nifti_io.write_volume(probs_path, probs)
    refined_path = tmp_path / "refined.nii"
    assert main(["refine", "--candidate", str(cand_path), "--probs", str(probs_path),
                 "--prompts", str(prompts_path), "--out", str(refined_path),
                 "--tau-cls", "0.4", "--delta-roi", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("accept")
    refined = nifti_io.read_volume(refined_path)
    assert np.array_equal(refined.data > 0, organ)  # blob outside ROI removed

    # VLS: the blob rides along as a (wrong) pseudo-label; predictions disagree
    target_path = tmp_path / "target.nii"
    nifti_io.write_volume(target_path, mask_to_labels(candidate))
    man = nifti_io.ScanManifest(statuses={1: "pseudo"})
    man_path = tmp_path / "scan.manifest"
    nifti_io.write_manifest(man_path, man)
    bad_fg = np.where(organ, np.float32(0.95), np.float32(0.05))
    bad_probs_path = tmp_path / "bad_probs.nii"
    nifti_io.write_volume(bad_probs_path, ProbVolume(np.stack([1.0 - bad_fg, bad_fg])))
    mask_path = tmp_path / "vls.nii"
    assert main(["vls-mask", "--probs", str(bad_probs_path), "--target", str(target_path),
                 "--manifest", str(man_path), "--out", str(mask_path)]) == 0
    mask_img = nifti_io.read_volume(mask_path)
    kept = mask_img.data > 0
    assert not kept[blob & ~organ].any()   # disagreeing pseudo voxels dropped
    assert kept[organ].all()               # agreeing pseudo voxels kept
    assert kept[~candidate].all()          # non-pseudo voxels always kept


def test_run_subcommand_with_config_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "oracle = phantom\n"
        "rounds = 1\n"
        "entropy_gate_from_round = 1\n"
        "scans = 3\n"
        "test_scans = 1\n"
        "organs = 2\n"
        "dims = 16,16,16\n"
        "keep_fraction = 0.5\n"
        "seed = 1\n")
    out_dir = tmp_path / "run_out"
    assert main(["run", "--config", str(cfg), "--seed", "2",
                 "--out", str(out_dir)]) == 0
    assert "mean DSC" in capsys.readouterr().out
    assert (out_dir / "round_1.csv").exists()
    assert (out_dir / "final_eval.csv").exists()
    assert (out_dir / "final_summary.csv").exists()
    assert (out_dir / "run_manifest.txt").exists()
    manifest = (out_dir / "run_manifest.txt").read_text()
    assert "seed=2" in manifest  # flag overrides config
    targets = list((out_dir / "targets").glob("*.labels.nii"))
    assert len(targets) == 3


def test_run_rejects_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("rounds = 2\nentropy_gate_from_round = 9\n")
    assert main(["run", "--config", str(cfg)]) == 1
    assert "error:" in capsys.readouterr().err
