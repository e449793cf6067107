from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from modgan.checkpoint import Checkpoint, build_model
from modgan.composer import aggregate_masks, transform_chain, upsample_mask
from modgan.config import ConfigError, TrainConfig
from modgan.data.colormnist import load_split
from modgan.data.manifest import ImageSet, gray_uint8
from modgan.evaluator import (
    AttrClassifier,
    ClassifierConfig,
    EvalTable,
    EvaluationError,
    all_combinations,
    check_gate,
    classification_error,
    combo_tag,
    export_mask_report,
    run_ablation,
    sample_targets_different,
    tables_csv,
    tables_text,
    train_classifier,
)
from modgan.schema import COLORMNIST

# Stub world: attribute j's label is written into pixel (0, 0, j) of channel 0,
# so a "classifier" can read it back exactly and a "translator" can set it.
STEP = 20


def _encode(v: torch.Tensor) -> torch.Tensor:
    return (v * STEP).float() / 127.5 - 1.0


def _decode(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 127.5 / STEP).round().long()


class PixelReader(torch.nn.Module):
    def __init__(self, sizes):
        super().__init__()
        self.sizes = sizes

    def forward(self, x):
        return [torch.nn.functional.one_hot(_decode(x[:, 0, 0, j]).clamp(0, n - 1), n).float() for j, n in enumerate(self.sizes)]


def stub_classifier(accuracy: float = 1.0) -> AttrClassifier:
    names = COLORMNIST.names
    acc = {n: accuracy for n in names}
    return AttrClassifier(PixelReader(COLORMNIST.value_counts), list(names), COLORMNIST, acc, dict(acc))


def stub_test_set(n: int = 60, seed: int = 0) -> ImageSet:
    g = torch.Generator().manual_seed(seed)
    labels = torch.stack([torch.randint(0, k, (n,), generator=g) for k in COLORMNIST.value_counts], dim=1)
    images = torch.full((n, 3, 8, 8), 128, dtype=torch.uint8)
    images[:, 0, 0, : labels.shape[1]] = (labels * STEP).to(torch.uint8)
    return ImageSet(images, labels)


def identity(x, steps):
    return x.clone()


def perfect(x, steps):
    y = x.clone()
    for i, t in steps:
        y[:, 0, 0, i] = _encode(t)
    return y


def only(attr_index):
    def run(x, steps):
        return perfect(x, [(i, t) for i, t in steps if i == attr_index])

    return run


# -- targets and tags --------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(n_values=st.integers(2, 12), seed=st.integers(0, 10_000))
def test_targets_always_differ(n_values, seed):
    g = torch.Generator().manual_seed(seed)
    src = torch.randint(0, n_values, (200,), generator=g)
    tgt = sample_targets_different(src, n_values, g)
    assert (tgt != src).all() and tgt.min() >= 0 and tgt.max() < n_values


def test_targets_uniform_over_others():
    from scipy.stats import chisquare

    g = torch.Generator().manual_seed(0)
    tgt = sample_targets_different(torch.zeros(20_000, dtype=torch.long), 5, g)
    counts = torch.bincount(tgt, minlength=5).numpy()
    assert counts[0] == 0
    assert chisquare(counts[1:]).pvalue > 1e-3


def test_combinations_and_tags():
    combos = all_combinations(COLORMNIST)
    assert len(combos) == 7 and combos[-1] == ("color", "style", "bgcolor")
    assert [combo_tag(COLORMNIST, c) for c in combos] == ["C", "S", "B", "CS", "CB", "SB", "CSB"]


# -- classification error on stubs --------------------------------------------------


def test_identity_translator_is_always_wrong():
    table = classification_error(stub_classifier(), identity, stub_test_set(), COLORMNIST)
    assert set(table.rows.values()) == {100.0}


def test_perfect_translator_scores_zero():
    for order in ("fixed", "random"):
        table = classification_error(stub_classifier(), perfect, stub_test_set(), COLORMNIST, order=order)
        assert set(table.rows.values()) == {0.0}


def test_partial_translator_rows():
    table = classification_error(stub_classifier(), only(0), stub_test_set(), COLORMNIST)
    assert table.rows["C"] == 0.0
    assert all(table.rows[t] == 100.0 for t in ("S", "B", "CS", "CB", "SB", "CSB"))


def test_mean_aggregate_averages_attributes():
    test = stub_test_set()
    combos = [("color", "style"), ("color", "style", "bgcolor")]
    any_ = classification_error(stub_classifier(), only(0), test, COLORMNIST, combos)
    mean = classification_error(stub_classifier(), only(0), test, COLORMNIST, combos, aggregate="mean")
    assert any_.rows == {"CS": 100.0, "CSB": 100.0}
    assert mean.rows["CS"] == pytest.approx(50.0)
    assert mean.rows["CSB"] == pytest.approx(200.0 / 3)


def test_fixed_order_follows_schema_order():
    seen = set()

    def spy(x, steps):
        seen.add(tuple(i for i, _ in steps))
        return perfect(x, steps)

    classification_error(stub_classifier(), spy, stub_test_set(), COLORMNIST, [("bgcolor", "color")])
    assert seen == {(0, 2)}


def test_random_order_visits_all_permutations():
    seen: dict[tuple, int] = {}

    def spy(x, steps):
        key = tuple(i for i, _ in steps)
        seen[key] = seen.get(key, 0) + len(x)
        return perfect(x, steps)

    classification_error(stub_classifier(), spy, stub_test_set(600), COLORMNIST, [("color", "style", "bgcolor")], order="random")
    assert len(seen) == 6 and sum(seen.values()) == 600
    assert min(seen.values()) > 50


def test_single_step_random_order_equals_fixed():
    # the translator fails on odd source colors, so the table depends on the targets
    def flaky(x, steps):
        y = perfect(x, steps)
        odd = _decode(x[:, 0, 0, 0]) % 2 == 1
        y[odd] = x[odd]
        return y

    test = stub_test_set(80)
    combos = [("color",), ("style",), ("bgcolor",)]
    fixed = classification_error(stub_classifier(), flaky, test, COLORMNIST, combos, batch=200)
    rand = classification_error(stub_classifier(), flaky, test, COLORMNIST, combos, batch=200, order="random")
    assert fixed.rows == rand.rows
    assert 0 < fixed.rows["C"] < 100


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), p=st.floats(0, 1))
def test_errors_bounded_and_deterministic(seed, p):
    def noisy(x, steps):
        y = perfect(x, steps)
        drop = torch.rand(len(x), generator=torch.Generator().manual_seed(int(x.sum().item() * 1000) % 997)) < p
        y[drop] = x[drop]
        return y

    test = stub_test_set(30, seed)
    a = classification_error(stub_classifier(), noisy, test, COLORMNIST, seed=seed)
    b = classification_error(stub_classifier(), noisy, test, COLORMNIST, seed=seed)
    assert a.rows == b.rows
    for v in a.rows.values():
        assert 0.0 <= v <= 100.0
        assert (v * 30 / 100) == pytest.approx(round(v * 30 / 100), abs=1e-3)


def test_bad_order_and_aggregate():
    with pytest.raises(ValueError):
        classification_error(stub_classifier(), identity, stub_test_set(), COLORMNIST, order="shuffled")
    with pytest.raises(ValueError):
        classification_error(stub_classifier(), identity, stub_test_set(), COLORMNIST, aggregate="max")


def test_gate_refuses_weak_classifier():
    weak = stub_classifier(0.9)
    with pytest.raises(EvaluationError, match="below 0.95"):
        classification_error(weak, perfect, stub_test_set(), COLORMNIST)
    check_gate(weak, ["color"], 0.9)
    classification_error(weak, perfect, stub_test_set(), COLORMNIST, gate=0.9)


# -- ablation tables ----------------------------------------------------------------


def test_ablation_requires_all_variants():
    with pytest.raises(ConfigError, match="no-cyclic"):
        run_ablation({"full": perfect, "no-mask": identity}, stub_classifier(), stub_test_set(), COLORMNIST)


def test_ablation_tables():
    variants = {"full": perfect, "no-mask": identity, "no-cyclic": only(1)}
    tables = run_ablation(variants, stub_classifier(), stub_test_set(), COLORMNIST)
    assert list(tables) == ["full", "no-mask", "no-cyclic", "full-random"]
    assert tables["full-random"].order == "random" and tables["full-random"].variant == "full"
    csv_text = tables_csv(tables)
    lines = csv_text.splitlines()
    assert lines[0] == "variant,order,combination,error_percent"
    assert len(lines) == 1 + 4 * 7
    assert "no-mask,fixed,CSB,100.00" in lines and "full,random,C,0.00" in lines
    text = tables_text(tables).splitlines()
    assert text[0].split() == ["Method", "C", "S", "B", "CS", "CB", "SB", "CSB"]
    assert text[-1].startswith("full (random order)")


def test_table_text_format():
    t = EvalTable({"C": 1.234, "CS": 50.0}, variant="no-mask")
    assert t.to_text().splitlines()[1].split() == ["no-mask", "1.23", "50.00"]
    assert t.to_csv().splitlines()[1] == "no-mask,fixed,C,1.23"


# -- classifier -----------------------------------------------------------------------


def test_classifier_rejects_degenerate_labels(tiny_data):
    data = ImageSet.from_manifest(load_split(tiny_data, "train"))
    data.labels[:, 0] = 0
    with pytest.raises(EvaluationError, match="degenerate"):
        train_classifier(data, COLORMNIST, ClassifierConfig(epochs=1))


def test_classifier_trains_and_round_trips(tiny_data, tmp_path):
    train = ImageSet.from_manifest(load_split(tiny_data, "train"))
    test = ImageSet.from_manifest(load_split(tiny_data, "test"))
    clf = train_classifier(train, COLORMNIST, ClassifierConfig(epochs=2, width=8, batch_size=16), test)
    assert clf.attributes == ["number", "color", "style", "bgcolor"]
    assert set(clf.accuracy) == set(clf.train_accuracy) == set(clf.attributes)
    clf.save(tmp_path / "clf")
    back = AttrClassifier.load(tmp_path / "clf")
    x = test.images.float() / 127.5 - 1
    assert torch.equal(back.predict(x), clf.predict(x))
    assert back.accuracy == clf.accuracy


def test_color_is_learnable_nearest_centroid(tiny_data):
    # oracle: mean color of the non-background pixels identifies the stroke color
    m = load_split(tiny_data, "train")
    data = ImageSet.from_manifest(m)
    x = data.images.float()
    bg = x[:, :, :1, :1]
    fg = ((x - bg).abs().sum(1, keepdim=True) > 60).float()
    mean_fg = (x * fg).sum((2, 3)) / fg.sum((2, 3)).clamp(min=1)
    color = data.labels[:, 0]
    centroids = torch.stack([mean_fg[color == c].mean(0) for c in range(5)])
    pred = torch.cdist(mean_fg, centroids).argmin(1)
    assert (pred == color).float().mean().item() >= 0.95


# -- mask reports ---------------------------------------------------------------------


def test_mask_report_files_and_values(tmp_path):
    cfg = TrainConfig(image_size=32, width=1 / 32, n_res=1, seed=1)
    torch.manual_seed(1)
    ckpt = Checkpoint(build_model(cfg, COLORMNIST).eval(), COLORMNIST, cfg, 0, 0)
    images = torch.randint(0, 256, (2, 3, 32, 32), dtype=torch.uint8)
    plans = [[("color", "red")], [("color", "blue"), ("bgcolor", "white")]]
    paths = export_mask_report(ckpt, images, plans, tmp_path)
    assert [p.name for p in paths] == [f"img{n:03d}_plan{p:02d}_grid.png" for n in range(2) for p in range(2)]
    grid = np.asarray(Image.open(paths[1]))
    assert grid.shape == (32, 32 * 5, 3)

    x = images[1:2].float() / 127.5 - 1
    with torch.no_grad():
        _, masks, _ = transform_chain(ckpt.model, ckpt.model.encoder(x), [(0, torch.tensor([1])), (2, torch.tensor([2]))])
    for k, m in enumerate(masks):
        expect = gray_uint8(upsample_mask(m[0], 32)[0])
        assert np.array_equal(np.asarray(Image.open(tmp_path / f"img001_plan01_mask{k}.png")), expect)
    agg = gray_uint8(aggregate_masks([m[0] for m in masks], 32)[0])
    assert np.array_equal(np.asarray(Image.open(tmp_path / "img001_plan01_aggregate.png")), agg)
