"""Training / evaluation / ablation drivers on a small synthetic corpus."""

import math
from dataclasses import replace

import numpy as np
import pytest

from nsva import harness as H
from nsva import tensor as T
from nsva.model import Batch
from nsva.synth import SynthConfig, showcase_scene, generate_corpus, with_scene

CORPUS = SynthConfig(seed=0, games=8)
QUICK = H.RunConfig(epochs=3, beam=2)


@pytest.fixture(scope="module")
def corpus():
    base = generate_corpus(CORPUS)
    return with_scene(base, showcase_scene(base.roster, CORPUS))


@pytest.fixture(scope="module")
def prep(corpus):
    return H.prepare(corpus)


@pytest.fixture(scope="module")
def trained(prep):
    run = replace(QUICK, epochs=8)
    return H.train(run, prep, H.make_split(prep, run, "train", limit=24), H.make_split(prep, run, "val"))


class TestRunConfig:
    def test_stream_labels_canonical(self):
        assert H.RunConfig(streams="pa+t").streams == "T+PA"
        assert H.parse_streams(H.FULL) == H.STREAMS

    @pytest.mark.parametrize("bad", ["", "T+XYZ", "T+T"])
    def test_invalid_streams(self, bad):
        with pytest.raises(ValueError):
            H.RunConfig(streams=bad)

    def test_invalid_task(self):
        with pytest.raises(ValueError):
            H.RunConfig(task="summary")

    def test_json_round_trip(self):
        run = H.RunConfig(streams="T+PB", train_limit=4)
        assert H.RunConfig.from_json(run.to_json()) == run

    def test_ablation_rows_in_toggle_order(self):
        for row in H.ABLATION_ROWS:
            assert H.RunConfig(streams=row).streams == row


class TestPrepare:
    def test_features_for_every_clip(self, corpus, prep):
        assert set(prep.features) == {s.clip_id for s in corpus.scenes}
        st = prep.features[corpus.scenes[0].clip_id]
        assert st.coarse.shape[1] == 64 and st.fused().shape[1] == 128

    def test_split_partition(self, prep):
        ids = [r.clip_id for s in ("train", "val", "test") for r in prep.records_in(s)]
        assert sorted(ids) == sorted(r.clip_id for r in prep.records)

    def test_feature_file_round_trip(self, prep, tmp_path):
        H.save_features(tmp_path / "f.bin", prep.features)
        back = H.load_features(tmp_path / "f.bin")
        cid = next(iter(prep.features))
        np.testing.assert_array_equal(back[cid].coarse, prep.features[cid].coarse)
        np.testing.assert_array_equal(back[cid].position_aware, prep.features[cid].position_aware)


class TestTrain:
    def test_same_seed_same_curve(self, prep):
        a = H.train(QUICK, prep, H.make_split(prep, QUICK, "train", limit=16))
        b = H.train(QUICK, prep, H.make_split(prep, QUICK, "train", limit=16))
        assert a.history == b.history
        for k, v in a.model.state_dict().items():
            np.testing.assert_array_equal(v, b.model.state_dict()[k])

    def test_history_rows(self, trained):
        assert [r["epoch"] for r in trained.history] == list(range(1, 9))
        assert "val_loss" in trained.history[-1]
        assert trained.history[-1]["loss"] < trained.history[0]["loss"]

    @pytest.mark.parametrize("streams", ["T", "PA", "BAL+BAS"])
    def test_partial_stream_paths_train(self, prep, streams):
        run = replace(QUICK, streams=streams)
        data = H.make_split(prep, run, "train", limit=16)
        if streams == "T":
            assert data.batch.fine.shape[1] == 0
        elif "T" not in run.toggles:
            assert data.batch.coarse.shape[1] == 0
        res = H.train(run, prep, data)
        assert all(math.isfinite(r["loss"]) for r in res.history)
        assert res.history[-1]["loss"] < res.history[0]["loss"]

    def test_nan_aborts_with_dump(self, prep, tmp_path):
        data = H.make_split(prep, QUICK, "train", limit=8)
        data.batch.coarse[3, 0, 0] = np.nan
        with pytest.raises(H.TrainingAborted, match="nan_batch"):
            H.train(replace(QUICK, batch_size=8), prep, data, out_dir=tmp_path)
        dump = np.load(tmp_path / "nan_batch.npz")
        assert np.isnan(dump["coarse"]).any()
        assert len(dump["clip_ids"]) == 8

    def test_stop_loss(self, prep):
        run = replace(QUICK, epochs=50, stop_loss=1e9)
        res = H.train(run, prep, H.make_split(prep, run, "train", limit=8))
        assert len(res.history) == 1

    def test_empty_split(self, prep):
        with pytest.raises(ValueError):
            H.train(QUICK, prep, H.make_split(prep, QUICK, "train", records=[]))


class TestFineStreamMatters:
    def test_zeroing_fine_track_changes_logits(self, trained, prep):
        model = trained.model
        data = H.make_split(prep, trained.run, "val")
        b = data.batch
        zeroed = Batch(b.coarse, b.coarse_valid, np.zeros_like(b.fine), b.fine_valid)
        inputs = np.array([t[:-1] for t in data.targets[:1]])
        with T.no_grad():
            la = model.logits(model.encode(b.select([0])), inputs, "caption").data
            lb = model.logits(model.encode(zeroed.select([0])), inputs, "caption").data
        assert np.abs(la - lb).max() > 1e-6


class TestCheckpoint:
    def test_round_trip(self, trained, prep, tmp_path):
        H.save_checkpoint(tmp_path, trained.model, trained.run)
        model, run = H.load_checkpoint(tmp_path)
        assert run == trained.run
        data = H.make_split(prep, run, "val")
        a = H.decode_split(trained.model, data, "caption", 2)
        b = H.decode_split(model, data, "caption", 2)
        assert [x.tokens for x in a] == [x.tokens for x in b]

    def test_checkpoint_bytes_deterministic(self, trained, tmp_path):
        H.save_checkpoint(tmp_path / "a", trained.model, trained.run)
        H.save_checkpoint(tmp_path / "b", trained.model, trained.run)
        for name in ("checkpoint.bin", "vocab.json", "run.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestEvaluate:
    def test_caption_report(self, trained, prep):
        data = H.make_split(prep, trained.run, "val")
        rep = H.evaluate(trained.model, data, "caption", width=2)
        assert set(rep["metrics"]) == {"B@1", "B@2", "B@3", "B@4", "M", "R_L", "C"}
        assert set(rep["logprob_sums"]) == {"1", "2"}
        assert rep["clips"] == len(data) and 0 <= rep["exact_match"] <= 1
        assert rep["distance_accuracy"] is None or 0 <= rep["distance_accuracy"] <= 1

    def test_task_mismatch(self, trained, prep):
        data = H.make_split(prep, replace(trained.run, task="action"), "val")
        with pytest.raises(KeyError):
            H.evaluate(trained.model, data, "action")

    def test_distance_accuracy_oracle(self):
        preds = [["miss", "a", "26'"], ["b", "8'"], ["c"], ["rebound"]]
        refs = [["miss", "a", "26'"], ["b", "15'"], ["c", "2'"], ["rebound"]]
        # the last pair carries no distance token and is skipped
        assert H.distance_accuracy(preds, refs) == pytest.approx(1 / 3)
        assert H.distance_accuracy([["x"]], [["x"]]) is None


class TestActionFixture:
    def test_missed_three_then_defensive_rebound(self, prep):
        run = H.RunConfig(task="action", epochs=500, stop_loss=0.01)
        fig = [r for r in prep.records if r.game_id == "SHOW"]
        records = fig + prep.records_in("train")[:31]
        data = H.make_split(prep, run, records=records)
        res = H.train(run, prep, data)
        (out,) = H.decode_split(res.model, data.subset([0]), "action", 1)
        assert out.tokens == ["3-pt-jump-shot-missed", "defensive-rebound"]


class TestAblation:
    def test_single_row_table(self, prep):
        rows = H.ablate(["T"], replace(QUICK, train_limit=8), prep, seeds=[0], width=1)
        assert len(rows) == 1 and rows[0].label == "T"
        s = rows[0].summary()
        assert s["seeds"] == 1 and math.isfinite(s["val_loss"])

    def test_rows_keep_requested_order(self, prep):
        order = ["T+PA", "T", "T+BAL"]
        rows = H.ablate(order, replace(QUICK, epochs=1, train_limit=8), prep, seeds=[0], decode=False)
        assert [r.label for r in rows] == order

    def test_noise_tolerance_oracle(self):
        a = H.AblationRow("T", [0, 1, 2], [1.0, 2.0, 3.0], [], [])
        b = H.AblationRow("T+PA", [0, 1, 2], [2.0, 2.0, 5.0], [], [])
        pooled = (np.var([1, 2, 3], ddof=1) + np.var([2, 2, 5], ddof=1)) / 2
        assert H.noise_tolerance([a, b]) == pytest.approx(2 * math.sqrt(pooled / 3))

    def test_checks(self):
        mk = lambda lab, loss, acc: H.AblationRow(lab, [0, 1], [loss, loss + 0.01], [acc, acc], [])
        rows = [mk("T", 3.0, 0.2), mk("T+PA", 2.5, 0.5), mk(H.FULL, 2.0, 0.6)]
        c = H.ablation_checks(rows)
        assert c["full_not_worse_than_subsets"] and c["full_dominates_coarse_only"]
        assert c["pa_improves_distance"] and c["pa_distance_gain"] == pytest.approx(0.3)
        rows[2] = mk(H.FULL, 4.0, 0.6)
        c = H.ablation_checks(rows)
        assert not c["full_not_worse_than_subsets"] and set(c["subsets_beating_full"]) == {"T", "T+PA"}
