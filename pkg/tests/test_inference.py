import json

import jsonschema
import numpy as np
import pandas as pd
import pytest
from dldlscore.imaging import MultispectralImage, dihedral_variants, save_image
from dldlscore.inference import (
    PREDICTION_COLUMNS,
    PredictionRecord,
    evaluate_test,
    evaluation_table,
    export_predictions,
    predict_augmented,
    predict_pmfs,
    predict_plants,
    read_plant_list,
    read_predictions,
)
from dldlscore.labeldist import LabelDistribution, expectation, normal_pmfs, spread
from dldlscore.training import DatasetIndex
from helpers import DS_SPACE, constant_model

# minimal FeatureCollection-of-points schema, enough to pin the export contract
GEOJSON_SCHEMA = {
    "type": "object",
    "required": ["type", "features"],
    "properties": {
        "type": {"const": "FeatureCollection"},
        "features": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type", "geometry", "properties"],
                "properties": {
                    "type": {"const": "Feature"},
                    "geometry": {
                        "type": "object",
                        "required": ["type", "coordinates"],
                        "properties": {
                            "type": {"const": "Point"},
                            "coordinates": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 3},
                        },
                    },
                    "properties": {
                        "type": "object",
                        "required": ["plant_id", "ds_pred", "sigma_pred", "confidence", "model_id"],
                    },
                },
            },
        },
    },
}


def image(rng, size=24):
    return MultispectralImage(rng.normal(size=(5, size, size)))


def record(pid, ds=3.0, x=1.5, y=-2.25):
    pmf = normal_pmfs(ds, 0.6, DS_SPACE)
    dist = LabelDistribution(pmf, DS_SPACE)
    return PredictionRecord(pid, x, y, dist, expectation(dist), spread(dist), spread(dist) / 0.6, "m1")


class TestPredictAugmented:
    def test_constant_model_equality(self, rng):
        target = normal_pmfs(4.0, 1.0, DS_SPACE)
        model = constant_model(target)
        img = image(rng)
        single = predict_pmfs(model, img.data[None])[0]
        rec = predict_augmented(model, img, normalization=None)
        np.testing.assert_allclose(rec.pmf.pmf, single, atol=1e-7)
        np.testing.assert_allclose(rec.pmf.pmf, target, atol=1e-6)

    def test_valid_pmf_within_variant_hull(self, rng, tiny_model):
        img = image(rng)
        rec = predict_augmented(tiny_model, img, normalization=None)
        assert np.all(rec.pmf.pmf >= 0) and rec.pmf.pmf.sum() == pytest.approx(1.0, abs=1e-6)
        variants = np.stack([v.data for v in dihedral_variants(img)])
        means = predict_pmfs(tiny_model, variants) @ DS_SPACE.bin_centers
        assert means.min() - 1e-9 <= rec.ds_pred <= means.max() + 1e-9

    def test_confidence_one(self, rng):
        target = normal_pmfs(5.0, 0.6, DS_SPACE)
        model = constant_model(target)
        sigma = spread(LabelDistribution(target, DS_SPACE))
        rec = predict_augmented(model, image(rng), sigma_train=sigma, normalization=None)
        assert rec.confidence == pytest.approx(1.0, abs=1e-6)
        assert rec.sigma_pred / rec.confidence == pytest.approx(sigma)

    def test_default_sigma_is_head_std(self, rng, tiny_model):
        rec = predict_augmented(tiny_model, image(rng))
        assert rec.confidence == pytest.approx(rec.sigma_pred / 0.6)

    def test_deterministic(self, rng, tiny_model):
        img = image(rng)
        a = predict_augmented(tiny_model, img)
        b = predict_augmented(tiny_model, img)
        assert np.array_equal(a.pmf.pmf, b.pmf.pmf)

    def test_non_square(self, tiny_model):
        with pytest.raises(ValueError):
            predict_augmented(tiny_model, MultispectralImage(np.zeros((5, 24, 12))), normalization=None)

    def test_confidence_invariant_under_relabeling(self):
        pmf = normal_pmfs(5.0, 1.3, DS_SPACE)
        dist = LabelDistribution(pmf, DS_SPACE)
        moved = dist.transported(DS_SPACE.affine(2.5, -1.0))
        assert spread(moved) / (0.6 * 2.5) == pytest.approx(spread(dist) / 0.6, rel=1e-12)


class TestEvaluationTable:
    def test_perfect_oracle(self):
        ds = np.array([0, 1, 1, 5, 10], dtype=float)
        truths = normal_pmfs(ds, 0.6, DS_SPACE)
        t = evaluation_table(ds, truths, truths, DS_SPACE).table
        np.testing.assert_allclose(t["mae"], 0.0, atol=1e-12)
        np.testing.assert_allclose(t["mdo"], 1.0, atol=1e-12)

    def test_constant_predictor_at_zero(self):
        ds = np.array([0.0, 0.0, 10.0])
        space = DS_SPACE
        # one-hot truths so the expectations are the class values themselves
        truths = np.zeros((3, space.num_bins))
        truths[:2, 1] = 1.0
        truths[2, 21] = 1.0
        preds = np.tile(truths[0], (3, 1))
        result = evaluation_table(ds, truths, preds, space)
        t = result.table
        assert t.loc["0", "mae"] == 0.0
        assert t.loc["10", "mae"] == pytest.approx(10.0, abs=1e-12)
        assert result.omitted == list(range(1, 10))

    def test_plain_and_corrected_totals(self):
        # class 2: three rows with errors 0, 0, 0.3 -> mean 0.1
        # class 7: one row with error 0.9
        # plain total: (0 + 0 + 0.3 + 0.9) / 4 = 0.3; corrected: (0.1 + 0.9) / 2 = 0.5
        space = DS_SPACE
        ds = np.array([2.0, 2.0, 2.0, 7.0])
        truths = normal_pmfs(ds, 0.6, space)
        preds = normal_pmfs(ds + np.array([0.0, 0.0, 0.3, 0.9]), 0.6, space)
        t = evaluation_table(ds, truths, preds, space).table
        err = np.abs(truths @ space.bin_centers - preds @ space.bin_centers)
        assert t.loc["total", "mae"] == pytest.approx(err.mean(), abs=1e-12)
        assert t.loc["total (corr.)", "mae"] == pytest.approx((err[:3].mean() + err[3]) / 2, abs=1e-12)
        # the numbers above, up to the discretization of the normal
        assert t.loc["total", "mae"] == pytest.approx(0.3, abs=1e-3)
        assert t.loc["total (corr.)", "mae"] == pytest.approx(0.5, abs=1e-3)
        classes = t.drop(index=["total", "total (corr.)"])
        for col in ("mae", "mdo"):
            weighted = (classes[col] * classes["n"]).sum() / classes["n"].sum()
            assert t.loc["total", col] == pytest.approx(weighted, abs=1e-9)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluation_table([], np.zeros((0, 23)), np.zeros((0, 23)), DS_SPACE)

    def test_evaluate_test_on_index(self, tiny_dataset, tiny_model, tmp_path):
        result = evaluate_test(tiny_model, tiny_dataset, augmented=False)
        t = result.table
        assert t.loc["total", "n"] == len(tiny_dataset)
        assert t.drop(index=["total", "total (corr.)"])["n"].sum() == len(tiny_dataset)
        assert ((t["mdo"] >= 0) & (t["mdo"] <= 1)).all()
        result.to_csv(tmp_path / "t.csv")
        back = pd.read_csv(tmp_path / "t.csv", index_col=0, dtype={"true_ds": str})
        assert list(back.index) == list(t.index)

    def test_evaluate_test_needs_labels(self, tiny_dataset, tiny_model):
        frame = tiny_dataset.frame.copy()
        frame["ds_label"] = np.nan
        with pytest.raises(ValueError):
            evaluate_test(tiny_model, DatasetIndex(frame, tiny_dataset.root))


class TestExport:
    def test_single_record_csv(self, tmp_path):
        export_predictions([record("p1")], "csv", tmp_path / "out.csv")
        lines = (tmp_path / "out.csv").read_text().splitlines()
        assert lines[0] == ",".join(PREDICTION_COLUMNS)
        assert len(lines) == 2

    def test_csv_round_trip_sorted(self, tmp_path):
        recs = [record("p2", 4.0, 3.0, 1.0), record("p1", 7.5)]
        export_predictions(recs, "csv", tmp_path / "out.csv")
        back = read_predictions(tmp_path / "out.csv")
        assert [r["plant_id"] for r in back] == ["p1", "p2"]
        for got, want in zip(back, sorted(recs, key=lambda r: r.plant_id)):
            for k in ("x", "y", "ds_pred", "sigma_pred", "confidence"):
                assert got[k] == pytest.approx(getattr(want, k), abs=1e-6)
            assert got["model_id"] == "m1"

    def test_geojson_schema_and_round_trip(self, tmp_path):
        recs = [record("a", 1.0), record("b", 9.0, 10.0, 20.0)]
        export_predictions(recs, "geojson", tmp_path / "out.geojson")
        doc = json.loads((tmp_path / "out.geojson").read_text())
        jsonschema.validate(doc, GEOJSON_SCHEMA)
        assert len(doc["features"]) == 2
        back = read_predictions(tmp_path / "out.geojson")
        assert back[1]["x"] == 10.0 and back[1]["y"] == 20.0
        assert back[1]["ds_pred"] == pytest.approx(recs[1].ds_pred, abs=1e-6)

    def test_errors(self, tmp_path):
        with pytest.raises(ValueError):
            export_predictions([], "csv", tmp_path / "x.csv")
        with pytest.raises(ValueError):
            export_predictions([record("a")], "gpkg", tmp_path / "x.gpkg")
        with pytest.raises(OSError):
            export_predictions([record("a")], "csv", tmp_path / "missing" / "x.csv")


class TestPredictPlants:
    def test_partial_failure(self, tmp_path, rng, tiny_model):
        save_image(image(rng), tmp_path / "a.npz")
        (tmp_path / "broken.npz").write_bytes(b"not an archive")
        pd.DataFrame(
            {"plant_id": ["a", "b", "c"], "x": [0.0, 1.0, 2.0], "y": [0.0, 0.0, 0.0],
             "image_path": ["a.npz", "broken.npz", "nope.npz"]}
        ).to_csv(tmp_path / "plants.csv", index=False)
        plants = read_plant_list(tmp_path / "plants.csv")
        records, failures = predict_plants(tiny_model, plants, tmp_path, model_id="m")
        assert [r.plant_id for r in records] == ["a"]
        assert [f[0] for f in failures] == ["b", "c"]
        assert records[0].model_id == "m"

    def test_plant_list_columns(self, tmp_path):
        (tmp_path / "p.csv").write_text("plant_id,x\n1,2\n")
        with pytest.raises(ValueError):
            read_plant_list(tmp_path / "p.csv")
