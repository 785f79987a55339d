import math
import warnings

import numpy as np
import pytest

import carma_lab as cl


def tiny_model(layers=2, d=8, seed=1):
    return cl.Transformer(cl.TransformerConfig(n_layers=layers, d_model=d, n_heads=2, d_mlp=2 * d), seed)


def test_tokenizer_chunks_and_spans():
    tok = cl.Tokenizer.standard()
    ids, spans = tok.encode("brilliant film")
    assert spans == [(0, 3), (3, 5)]
    assert tok.decode(ids) == "brilliant film"
    with pytest.raises(cl.EncodingError):
        tok.encode("Brilliant")


def test_generators_are_deterministic():
    a = cl.gen_idm(3, 200)
    b = cl.gen_idm(3, 200)
    assert [x.prompt for x in a.train] == [x.prompt for x in b.train]
    assert (len(a.train), len(a.validation), len(a.test)) == (160, 20, 20)
    back = cl.dataset_from_tsv(a.to_tsv())
    assert [x.target for x in back.test] == [x.target for x in a.test]
    with pytest.raises(ValueError):
        cl.gen_sc(1, 10)


def test_forward_shapes_and_patch_identity():
    m = tiny_model()
    ids, spans = cl.Tokenizer.standard().encode_prompt("a brilliant film sentiment is")
    out = m.forward(ids, spans)
    assert out["logits"].shape == (len(ids), cl.Tokenizer.standard().vocab_size)
    assert len(out["hidden"]) == 3
    again = m.forward(ids, spans, {1: out["hidden"][1]})
    np.testing.assert_array_equal(again["logits"], out["logits"])
    with pytest.raises(cl.ContractError):
        m.forward(ids, spans, {1: np.zeros((2, 7))})


def test_losses():
    cfg = cl.CarmaConfig()
    cfg.tau = 1.0
    cfg.layer_start = cfg.layer_end = 1
    rows = np.array([[1e4, 0.0], [1e4, 0.0], [0.0, 1e4]])
    value = cl.mi_loss([rows, rows], [(0, 2), (2, 3)], cfg)
    # Anchors 0 and 1 each see one positive at sim 1 and one negative at sim 0.
    assert value == pytest.approx(2 * math.log1p(math.exp(-1.0)), abs=1e-9)
    assert cl.stability_loss([rows, rows, rows], cfg) == 0.0
    assert cl.default_layer_range(12) == (3, 4)
    assert cl.default_layer_range(24) == (6, 10)


def test_pooling():
    pooled, spans = cl.cap_pool(np.array([[1.0, 2.0], [3.0, 4.0]]), [(0, 2)], cl.PoolMode.SUM)
    np.testing.assert_array_equal(pooled, [[4.0, 6.0]])
    assert spans == [(0, 1)]
    pooled, _ = cl.cap_pool(np.array([[1.0, 2.0], [3.0, 4.0]]), [(0, 2)], cl.PoolMode.MAX)
    np.testing.assert_array_equal(pooled, [[3.0, 4.0]])


def test_metrics():
    assert cl.accuracy([1, 2, 3, 4], [1, 2, 0, 4]) == 75.0
    assert cl.consist_syn(10, 5) == 50.0
    assert cl.consist_syn(0, 0) is None
    assert cl.cv([1.0, 3.0]) == 0.5
    assert cl.ni(62.86, 52.47) == pytest.approx(19.80, abs=0.01)


def test_train_and_interventions():
    data = cl.gen_sc(2, 200)
    model = tiny_model()
    cfg = cl.TrainConfig()
    cfg.epochs = 1
    cfg.variant = cl.Variant.CARMA
    cfg.carma.layer_start, cfg.carma.layer_end = cl.default_layer_range(2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        log = cl.train(model, data, cfg)
    assert len(log.task_losses) == 10
    assert log.best_validation_accuracy == model.accuracy(data.validation)
    cap = cl.run_cap_eval(model, data.test, 1, cl.PoolMode.MEAN)
    assert cap.normalized_layer == 0.5
    ident = cl.run_synonym_eval(model, data.test, 0.25, [1, 2, 3, 4, 5],
                                cl.SynonymLexicon.identity(cl.Task.SC))
    assert all(v in (None, 100.0) for v in ident)
    rep = cl.replace_synonyms(data.test[0], 0.4, 1, cl.SynonymLexicon.for_task(cl.Task.SC))
    assert rep.example.target == data.test[0].target


def test_lab_commands(tmp_path):
    tsv, manifest = cl.lab.gen(cl.Task.SC, 1, 100, tmp_path / "data")
    assert tsv.name == "sc-s1-n100.tsv"
    assert manifest.exists()
    overrides = ["task=sc", "data.n_items=200", "model.n_layers=2", "model.d_model=8",
                 "model.n_heads=2", "model.d_mlp=16", "train.epochs=1"]
    for variant in (cl.Variant.ORIGINAL, cl.Variant.FT, cl.Variant.CARMA):
        cl.lab.train("", overrides, variant, [1], tmp_path)
    cap = cl.lab.cap(tmp_path, "1", "mean")
    assert cap.read_text().splitlines()[1].startswith("variant,task,intervention")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        syn = cl.lab.synonyms(tmp_path, [0.25], [1, 2, 3, 4, 5])
    assert "insufficient" in syn.read_text()
    assert cl.lab.report(tmp_path).exists()
    with pytest.raises(cl.ConfigError):
        cl.lab.train('{"nope": 1}', [], cl.Variant.FT, [1], tmp_path)
