import json
from dataclasses import replace

import numpy as np
import pytest

from dtpauth.dtp import DtpImage, read_pgm
from dtpauth.errors import ConfigurationError, InputError
from dtpauth.harness import cli
from dtpauth.harness.config import (ClassifierConfig, ExperimentConfig, SplitConfig, identical_fleet,
                                    load_config)
from dtpauth.harness.dataset import (generate_dataset, load_records, read_manifest, synchronize,
                                     verify_dataset)
from dtpauth.harness.experiment import (confusion_matrix, export_pgm, prepare, run_experiment,
                                        split_captures)
from dtpauth.harness.iqc import CaptureRecord, decode, encode, read_capture, write_capture

SMALL = ExperimentConfig(captures_per_device=6, dtp={"h": 16, "w": 16},
                         snr_grid_db=(-10.0, 0.0, 10.0),
                         classifier=ClassifierConfig(kind="knn", representation="hos", k=3),
                         split=SplitConfig(train_fraction=0.5, k_folds=2))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(SMALL, root)
    return root


def test_config_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(SMALL.to_json())
    back = load_config(path)
    assert back == SMALL
    assert load_config() == ExperimentConfig()


def test_config_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"sed": 1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"radio": {"fs": 1.0}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(split=SplitConfig(train_snrs=(3.0,)))
    with pytest.raises(ConfigurationError):
        SplitConfig(train_fraction=1.0)
    with pytest.raises(ConfigurationError):
        ClassifierConfig(kind="cnn", representation="hos")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json")


def test_identical_fleet():
    fleet = identical_fleet(SMALL)
    cfg = replace(SMALL, fleet=fleet)
    profiles = cfg.tx_profiles()
    assert len({(p.alpha, p.phi, p.carrier_offset_hz) for p in profiles}) == 1
    assert cfg.device_ids == SMALL.device_ids


def test_iqc_round_trip(tmp_path, rng):
    rec = CaptureRecord("tx9", "qam4", 12, 77, (rng.standard_normal(100) + 1j * rng.standard_normal(100)),
                        {"cpo": 0.5, "offset": 10}, {"lag": 3})
    data = encode(rec)
    assert data[:4] == b"IQC1"
    back = decode(data)
    assert back.capture_id == "tx9-qam4-00012"
    assert np.array_equal(back.samples, rec.samples) and back.meta == rec.meta
    write_capture(rec, tmp_path / "a.iqc")
    assert encode(read_capture(tmp_path / "a.iqc")) == data
    with pytest.raises(InputError):
        decode(b"NOPE" + data[4:])
    with pytest.raises(InputError):
        decode(data[:-8])


def test_dataset_counts_and_manifest(dataset):
    m = read_manifest(dataset)
    assert len(m["records"]) == 30
    assert verify_dataset(dataset) == 31
    recs = load_records(dataset)
    assert {r.device_id for r in recs} == set(SMALL.device_ids)
    assert all(abs(np.sqrt(np.mean(np.abs(r.samples.astype(complex)) ** 2)) - 1) < 1e-5 for r in recs)


def test_regeneration_byte_identical(dataset, tmp_path):
    again = generate_dataset(SMALL, tmp_path / "again")
    assert (again / "manifest.json").read_bytes() == (dataset / "manifest.json").read_bytes()


def test_manifest_detects_tampering(tmp_path):
    cfg = replace(SMALL, captures_per_device=2)
    root = generate_dataset(cfg, tmp_path / "t")
    victim = sorted((root / "captures").iterdir())[0]
    data = bytearray(victim.read_bytes())
    data[-1] ^= 1
    victim.write_bytes(bytes(data))
    with pytest.raises(InputError):
        verify_dataset(root)
    (root / "stray.txt").write_text("x")
    with pytest.raises(InputError):
        verify_dataset(root)


def test_synchronize_recovers_injection(dataset):
    rec = load_records(dataset)[7]
    s, rep = synchronize(rec, SMALL)
    assert s.size == 4000
    assert abs(rep.total_cfo_hz - rec.meta["delta_f"]) < 10.0
    assert abs((rep.cpo_rad - rec.meta["cpo"] + np.pi) % (2 * np.pi) - np.pi) < 0.05


def test_confusion_examples():
    assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3), np.eye(3))
    m = confusion_matrix([0, 1], [0, 0], 2)
    assert m[0].tolist() == [0.5, 0.5] and m[1].tolist() == [0.0, 0.0]
    r = confusion_matrix(np.random.default_rng(1).integers(0, 4, 200),
                         np.random.default_rng(2).integers(0, 4, 200), 4)
    assert np.allclose(r.sum(axis=1), 1, atol=1e-9)
    with pytest.raises(InputError):
        confusion_matrix([5], [0], 3)


def test_export_pgm_bytes(tmp_path):
    img = DtpImage(np.array([[0, 255], [128, 64]], dtype=np.uint8))
    export_pgm(img, tmp_path / "g.pgm")
    assert (tmp_path / "g.pgm").read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])
    assert np.array_equal(read_pgm(tmp_path / "g.pgm"), img.channel(0))
    with pytest.raises(InputError):
        export_pgm(img, tmp_path / "h.pgm", channel=1)


def test_split_disjoint_and_stratified(dataset):
    recs = load_records(dataset)
    tr, te = split_captures(recs, SMALL)
    assert not {recs[i].capture_id for i in tr} & {recs[i].capture_id for i in te}
    for dev in SMALL.device_ids:
        assert sum(recs[i].device_id == dev for i in tr) == 3


def test_experiment_reproducible(dataset, tmp_path):
    a = run_experiment(SMALL, dataset, tmp_path / "a", cache_dir=tmp_path / "cache")
    b = run_experiment(SMALL, dataset, tmp_path / "b", cache_dir=tmp_path / "cache")
    for name in ("accuracy_vs_snr.csv", "confusion.csv", "recall.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert set(a.per_snr) == {-10.0, 0.0, 10.0} and a.accuracy == b.accuracy
    assert len(list((tmp_path / "cache").iterdir())) == 1


def test_cnn_experiment_artifacts(dataset, tmp_path):
    cfg = replace(SMALL, classifier=ClassifierConfig(max_epochs=1, batch_size=8))
    bundle = run_experiment(cfg, dataset, tmp_path / "r", cache_dir=tmp_path / "cache")
    out = tmp_path / "r"
    for name in ("model.dtpm", "history.csv", "metrics.json", "confusion.csv"):
        assert (out / name).exists()
    assert len(list((out / "dtp").glob("*.pgm"))) == 5
    assert json.loads((out / "metrics.json").read_text())["method"] == "dtp-constellation+cnn"
    assert 0.0 <= bundle.accuracy <= 1.0


def test_prepare_rejects_unknown_devices(dataset, tmp_path):
    cfg = replace(SMALL, fleet=SMALL.fleet[:4])
    with pytest.raises(InputError):
        prepare(cfg, dataset, cache_dir=tmp_path)


def test_cli_smoke(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(replace(SMALL, captures_per_device=4).to_json())
    base = ["--config", str(conf), "--out-dir", str(tmp_path / "out")]
    assert cli.main(base + ["gen"]) == 0
    assert cli.main(base + ["sync", "tx1-qam4-00002"]) == 0
    report = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert "total_cfo_hz" in report
    assert cli.main(base + ["dtp", "tx1-qam4-00002", "--snr", "10", "--type", "eye"]) == 0
    assert len(list((tmp_path / "out" / "dtp").glob("*.pgm"))) == 2
    assert cli.main(base + ["sweep"]) == 0
    assert "snr_db,accuracy" in capsys.readouterr().out
    assert cli.main(base + ["sync", "nope"]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.json"), "gen"]) == 1
