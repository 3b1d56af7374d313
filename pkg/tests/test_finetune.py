import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from janus.encoder import ModelConfig
from janus.finetune import (
    Classifier,
    ClassifierHead,
    accuracy,
    classify,
    finetune,
    motif_task,
    rc_pooled_embed,
    read_task_tsv,
    write_task_tsv,
)
from janus.genome_io import reverse_complement, reverse_complement_str, tokenize
from janus.model import JanusModel
from janus.training import load_checkpoint

SMALL = ModelConfig(d_model=16, n_layers=2, n_experts=4, n_heads=2)


@pytest.fixture(scope="module")
def model():
    return JanusModel(SMALL)


@pytest.fixture(scope="module")
def clf(model):
    head = ClassifierHead.init(16, 3, seed=1)
    head.w.data *= 20.0  # spread the logits so argmax ties are not the common case
    return Classifier(model, head, ["x", "y", "z"])


class TestEmbedding:
    def test_strand_symmetric_exactly(self, model):
        t = tokenize("GATTACAGGCN")
        assert rc_pooled_embed(t, model).tobytes() == rc_pooled_embed(reverse_complement(t), model).tobytes()

    def test_palindrome_strands_agree(self, model):
        t = tokenize("ACGT")
        assert np.array_equal(t.ids, reverse_complement(t).ids)
        e = rc_pooled_embed(t, model)
        from janus.finetune import _pooled

        np.testing.assert_array_equal(e, _pooled(model, t.ids[None]).data[0])

    @pytest.mark.parametrize("n", [2, 5, 40])
    def test_shape_independent_of_length(self, model, n):
        assert rc_pooled_embed("A" * n, model).shape == (16,)

    def test_special_tokens_rejected(self, model):
        from janus.genome_io import TokenSequence

        with pytest.raises(ValueError, match="special"):
            rc_pooled_embed(TokenSequence([0, 1, 6]), model)

    def test_mean_over_all_fused_rows(self, model):
        from janus.finetune import _pooled

        ids = np.array([[0, 1, 2, 3]])
        fused = model.forward(ids).fused.data[0]
        np.testing.assert_allclose(_pooled(model, ids).data[0], fused.mean(axis=0), rtol=1e-6)


class TestClassify:
    def test_probabilities(self, clf):
        k, p = classify("ACGGT", clf)
        assert p.shape == (3,)
        assert p.sum() == pytest.approx(1.0, abs=1e-6)
        assert k == int(np.argmax(p))

    def test_deterministic(self, clf):
        a = classify("TTGACA", clf)
        b = classify("TTGACA", clf)
        assert a[0] == b[0] and a[1].tobytes() == b[1].tobytes()

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="ACGTN", min_size=2, max_size=40))
    def test_strand_invariant(self, clf, s):
        a, pa = classify(s, clf)
        b, pb = classify(reverse_complement_str(s), clf)
        assert a == b
        assert pa.tobytes() == pb.tobytes()

    def test_checkpoint_round_trip(self, clf, tmp_path):
        from janus.training import save_checkpoint

        path = save_checkpoint(clf.to_checkpoint(), tmp_path / "c.jnsc")
        back = Classifier.from_checkpoint(load_checkpoint(path))
        assert back.labels == ["x", "y", "z"]
        for s in ("ACGT", "GGGTTTAAAC"):
            assert classify(s, back)[1].tobytes() == classify(s, clf)[1].tobytes()

    def test_checkpoint_without_head(self, model):
        from janus.training import Checkpoint

        ckpt = Checkpoint(SMALL, None, {k: v.data for k, v in model.params.items()})
        with pytest.raises(ValueError, match="no classifier head"):
            Classifier.from_checkpoint(ckpt)

    def test_head_needs_two_classes(self):
        with pytest.raises(ValueError):
            ClassifierHead.init(8, 1)


class TestTaskFiles:
    def test_round_trip(self, tmp_path):
        rows = [("ACGT", "a"), ("GGNN", "b")]
        write_task_tsv(rows, tmp_path / "t.tsv")
        assert read_task_tsv(tmp_path / "t.tsv") == rows

    def test_comments_skipped(self, tmp_path):
        (tmp_path / "t.tsv").write_text("# header\n\nACGT\ta\n")
        assert read_task_tsv(tmp_path / "t.tsv") == [("ACGT", "a")]

    @pytest.mark.parametrize("body,line", [("ACGT\ta\nACGT\n", 2), ("ACGT\ta\tb\n", 1), ("ACXT\ta\n", 1), ("\ta\n", 1)])
    def test_errors_name_line(self, tmp_path, body, line):
        (tmp_path / "t.tsv").write_text(body)
        with pytest.raises(ValueError, match=f"t.tsv:{line}"):
            read_task_tsv(tmp_path / "t.tsv")


class TestMotifTask:
    def test_labels_match_content(self):
        rows = motif_task(0, 200)
        assert sum(y == "motif" for _, y in rows) == 100
        for s, y in rows:
            assert (("GATA" in s) or ("TATC" in s)) == (y == "motif")

    def test_deterministic(self):
        assert motif_task(3, 20) == motif_task(3, 20)


class TestFinetune:
    def test_single_class(self, model):
        with pytest.raises(ValueError, match="single class"):
            finetune(model, [("ACGT", "a"), ("GGCC", "a")], [("ACGT", "a")])

    def test_unknown_validation_label(self, model):
        with pytest.raises(ValueError, match="not seen"):
            finetune(model, [("ACGT", "a"), ("GGCC", "b")], [("ACGT", "c")], epochs=1)

    def test_does_not_mutate_backbone(self, model):
        before = {k: v.data.copy() for k, v in model.params.items()}
        finetune(model, [("ACGTAC", "a"), ("GGCCTT", "b")], [("ACGTAC", "a")], epochs=1)
        assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())

    def test_frozen_backbone_separable_task(self, tmp_path):
        # A/T-only versus C/G-only sequences: linearly separable in the pooled space
        rng = np.random.default_rng(0)
        rows = [("".join(rng.choice(list("AT" if i % 2 else "CG"), size=16)), "at" if i % 2 else "cg") for i in range(80)]
        m = JanusModel(SMALL)
        frozen = {k: v.data.copy() for k, v in m.params.items()}
        res = finetune(m, rows[:60], rows[60:], epochs=30, lr=3e-2, backbone_lr_scale=0.0, patience=30, out_dir=tmp_path)
        assert res.best_val_accuracy == 1.0
        assert accuracy(res.classifier, rows) == 1.0
        assert all(np.array_equal(frozen[k], v.data) for k, v in res.classifier.model.params.items())
        assert (tmp_path / "classifier.jnsc").exists()
        assert (tmp_path / "finetune_metrics.csv").read_text().startswith("epoch,train_ce,val_accuracy")

    def test_permuted_labels_near_chance(self):
        rows = motif_task(4, 240)
        labels = [y for _, y in rows]
        perm = np.random.default_rng(1).permutation(len(labels))
        shuffled = [(s, labels[i]) for (s, _), i in zip(rows, perm)]
        res = finetune(JanusModel(SMALL), shuffled[:160], shuffled[160:200], epochs=3, patience=3)
        held_out = accuracy(res.classifier, shuffled[200:])
        assert abs(held_out - 0.5) < 0.2

    def test_motif_task_learned(self):
        train_rows, val_rows, test_rows = motif_task(0, 800), motif_task(1, 200), motif_task(2, 400)
        model = JanusModel(ModelConfig(d_model=32, n_layers=2, n_experts=4, n_heads=4))
        res = finetune(model, train_rows, val_rows, epochs=9, lr=3e-3, backbone_lr_scale=1.0, patience=3)
        assert accuracy(res.classifier, test_rows) > 0.95
