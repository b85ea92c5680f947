import dataclasses

import numpy as np
import pytest

from seqft import checkpoint as ckpt
from seqft import data, lora, losses, metrics, nn, pipeline
from seqft import numerics as nx
from seqft.data import Buffer, TaskSpec, generate_task
from seqft.nn import ConfigError, encoder_linear_layers
from seqft.pipeline import (
    STRATEGIES,
    Context,
    Experiment,
    PipelineConfig,
    StageStore,
    kd_fft,
    lora_kd,
    mds_select,
    model_hash,
    reparameterize,
    run_sequence,
    stage_seed,
)

from .conftest import SMALL_ARCH, tiny_config
from .oracles import exhaustive_mds


@pytest.fixture(scope="module")
def ctx():
    cfg = tiny_config()
    return Context(cfg, StageStore())


@pytest.fixture(scope="module")
def reports(ctx):
    out = {}
    for strategy in STRATEGIES:
        out[strategy] = run_sequence(tiny_config(strategy=strategy), ctx.store, ctx)
    return out


def started(model, task, seed=1):
    m = model.copy()
    nn.reinit_seg_head(m, task.classes, seed)
    return m


def encoder_arrays(model):
    return {k: v.data for k, v in model.group("encoder").items()}


# --- config ----------------------------------------------------------------------------------
def test_config_defaults_and_round_trip():
    cfg = PipelineConfig()
    assert (cfg.mds_runs, cfg.lora_rank, cfg.kd_every, cfg.batch) == (1000, 2, 1, 8)
    assert (cfg.iters_pretrain, cfg.iters_fft, cfg.iters_lora_kd) == (3000, 1500, 600)
    back = PipelineConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.digest() == cfg.digest()


@pytest.mark.parametrize(
    "change, match",
    [
        ({"strategy": "nope"}, "unknown strategy"),
        ({"k": 11}, "exceeds"),
        ({"kd_every": 0}, "kd_every"),
        ({"lr_fft": 0.0}, "lr_fft"),
        ({"mask_ratio": 1.0}, "mask_ratio"),
        ({"tasks": []}, "empty"),
    ],
)
def test_config_validation(change, match):
    with pytest.raises(ConfigError, match=match):
        tiny_config(**change).validate()


def test_unknown_config_key():
    with pytest.raises(ConfigError, match="bogus"):
        PipelineConfig.from_dict({"bogus": 1})


def test_ablation_lattice_differs_only_by_toggles():
    chain, source, use_lora = zip(*STRATEGIES.values())
    assert STRATEGIES["medseqft"] == (True, "mds", True)
    # each single-component ablation flips exactly one toggle of the full method
    for name in ("seqft_mds_only", "seqft_kgrft_only"):
        diff = [a != b for a, b in zip(STRATEGIES[name], STRATEGIES["medseqft"])]
        assert sum(diff) == 1, name
    assert STRATEGIES["seqft_vanilla"] == (True, None, False)
    assert STRATEGIES["fft_parallel"] == (False, None, False)
    a = tiny_config(strategy="medseqft").to_dict()
    b = tiny_config(strategy="seqft_vanilla").to_dict()
    assert {k for k in a if a[k] != b[k]} == {"strategy"}


# --- pretraining -------------------------------------------------------------------------------
def test_pretrain_deterministic_and_improves():
    corpus = generate_task(data.pretrain_corpus_spec(0, 32))
    held_out = generate_task(data.pretrain_corpus_spec(99, 16)).images
    m1, hist = pipeline.pretrain_ssl(SMALL_ARCH, corpus, 60, seed=3, batch=8)
    m2, _ = pipeline.pretrain_ssl(SMALL_ARCH, corpus, 60, seed=3, batch=8)
    assert model_hash(m1) == model_hash(m2)
    init = nn.init_model(SMALL_ARCH, 3)
    assert pipeline.ssl_eval_loss(m1, held_out, 0) < pipeline.ssl_eval_loss(init, held_out, 0)
    assert len(hist) == 60
    # decoder and seg head are not touched by pretraining
    for group in ("decoder", "seg_head"):
        for k, v in init.group(group).items():
            assert np.array_equal(v.data, m1[k].data)


def test_init_loss_matches_uninformative_predictor():
    # an untrained predictor carries no information about the masked target, so its
    # expected error is var(x) + var(p) + (mean x - mean p)^2 from the marginals alone
    images = generate_task(data.pretrain_corpus_spec(0, 32)).images
    patches = nn.patchify(SMALL_ARCH, images)
    for seed in range(3):
        model = nn.init_model(SMALL_ARCH, seed)
        rng = nx.Rng(seed, "oracle")
        mask = nn.random_mask(SMALL_ARCH, 0.6, rng, len(images))
        with nx.no_grad():
            recon = nn.forward_ssl(model, images, mask).data.astype(np.float64)
        x, p = patches[mask], recon[mask]
        baseline = x.var() + p.var() + (x.mean() - p.mean()) ** 2
        measured = nn.masked_mse(nn.forward_ssl(model, images, mask), patches, mask).item()
        assert 0.5 * baseline < measured < 1.5 * baseline


# --- MDS ---------------------------------------------------------------------------------------
def test_mds_tie_rule_from_scores(ctx):
    task = generate_task(TaskSpec("t", 2, "disk", n_train=4, n_test=0))
    picked = mds_select(None, task, 2, 1, 0, np.array([0.42, 0.10, 0.10, 0.90]))
    assert [e.index for e in picked] == [1, 2]
    assert [e.avg_ssl_loss for e in picked] == [0.10, 0.10]
    everything = mds_select(None, task, 4, 1, 0, np.array([0.3, 0.2, 0.1, 0.0]))
    assert [e.index for e in everything] == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        mds_select(None, task, 5, 1, 0, np.zeros(4))


def test_mds_matches_exhaustive_rescoring(ctx):
    task = generate_task(TaskSpec("m", 2, "blob", 0.1, n_train=16, n_test=2, seed=4))
    picked = mds_select(ctx.m0, task, 5, runs=8, seed=21)
    expected, scores = exhaustive_mds(ctx.m0, task, 5, 8, 21)
    assert [e.index for e in picked] == expected
    for e in picked:
        assert e.avg_ssl_loss == pytest.approx(scores[e.index], rel=1e-5)


def test_mds_ties_on_constant_fixture():
    model = nn.init_model(SMALL_ARCH, 0)
    model["ssl_head.weight"].data[...] = 0.0
    model["ssl_head.bias"].data[...] = 0.5
    task = generate_task(TaskSpec("c", 2, "disk", n_train=6, n_test=0))
    task.images[...] = 0.5
    picked = mds_select(model, task, 3, runs=4, seed=0)
    assert [e.index for e in picked] == [0, 1, 2] == exhaustive_mds(model, task, 3, 4, 0)[0]


# --- KD-based FFT ------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def kd_setup(ctx):
    cfg = tiny_config()
    first, second = ctx.tasks
    prev, _ = kd_fft(started(ctx.m0, first), first, cfg, seed=1)
    buf = Buffer(cfg.k)
    buf.add(first, mds_select(None, first, cfg.k, cfg.mds_runs, 0, ctx.scores(first)))
    return cfg, prev, second, buf


def test_kd_fft_without_kd_steps_equals_plain_fft(kd_setup):
    cfg, prev, task, buf = kd_setup
    start = started(prev, task, 2)
    plain, _ = kd_fft(start, task, cfg, seed=5)
    never = dataclasses.replace(cfg, kd_every=10**9)
    idle, hist = kd_fft(start, task, never, seed=5, buffer=buf, teacher=pipeline._freeze(prev))
    assert hist.kd == []
    assert model_hash(plain) == model_hash(idle)


def test_kd_fft_teacher_frozen_and_inputs_untouched(kd_setup):
    cfg, prev, task, buf = kd_setup
    teacher = pipeline._freeze(prev)
    start = started(prev, task, 2)
    before_teacher, before_start = model_hash(teacher), model_hash(start)
    out, hist = kd_fft(start, task, cfg, seed=5, buffer=buf, teacher=teacher)
    assert model_hash(teacher) == before_teacher
    assert model_hash(start) == before_start
    assert len(hist.kd) == cfg.iters_fft and len(hist.seg) == cfg.iters_fft
    assert model_hash(out) != before_start


def test_kd_steps_update_encoder_only(kd_setup):
    cfg, prev, task, buf = kd_setup
    teacher = pipeline._freeze(prev)
    start = started(prev, task, 2)
    # with the segmentation step rate set to zero only KD steps change anything
    cfg0 = dataclasses.replace(cfg, lr_fft=1e-30)
    out, _ = kd_fft(start, task, cfg0, seed=5, buffer=buf, teacher=teacher)
    for k, v in start.params.items():
        moved = np.abs(out[k].data - v.data).max() > 1e-12
        if k.startswith("encoder.") and k != "encoder.mask_token":
            continue
        assert not moved, k


def test_kd_lowers_buffer_feature_gap(kd_setup):
    cfg, prev, task, buf = kd_setup
    cfg = dataclasses.replace(cfg, iters_fft=40, lr_kd=3e-3)
    teacher = pipeline._freeze(prev)
    start = started(prev, task, 2)
    with_kd, _ = kd_fft(start, task, cfg, seed=5, buffer=buf, teacher=teacher)
    without, _ = kd_fft(start, task, cfg, seed=5)
    images = data.stack_images([buf.sample(e) for e in buf.entries])
    with nx.no_grad():
        target = nn.forward_features(teacher, images)
        gap_kd = losses.kd_loss(nn.forward_features(with_kd, images), target).item()
        gap_plain = losses.kd_loss(nn.forward_features(without, images), target).item()
    assert gap_kd <= gap_plain


def test_kd_fft_empty_task_is_config_error(ctx):
    with pytest.raises(ConfigError):
        generate_task(TaskSpec("e", 2, "disk", n_train=0, n_test=2))
    ds = generate_task(TaskSpec("e", 2, "disk", n_train=1, n_test=2))
    empty = data.TaskDataset(dataclasses.replace(ds.spec, n_train=0), ds.images[1:], ds.masks[1:])
    with pytest.raises(ConfigError):
        kd_fft(started(ctx.m0, empty), empty, tiny_config(), seed=0)


# --- LoRA KD and reparameterization ---------------------------------------------------------------
@pytest.fixture(scope="module")
def lora_setup(kd_setup):
    cfg, prev, task, buf = kd_setup
    mid, _ = kd_fft(started(prev, task, 2), task, dataclasses.replace(cfg, iters_fft=30), seed=5)
    e_prev, e_mid = pipeline._freeze(prev), pipeline._freeze(mid)
    hashes = model_hash(e_prev), model_hash(e_mid)
    adapted, hist = lora_kd(e_prev, e_mid, task, 2, 200, 5e-3, seed=9, batch=4)
    return task, e_prev, e_mid, mid, hashes, adapted, hist


def test_lora_kd_teachers_unchanged(lora_setup):
    task, e_prev, e_mid, mid, hashes, adapted, hist = lora_setup
    assert (model_hash(e_prev), model_hash(e_mid)) == hashes


def test_lora_kd_beats_init_gap_and_decreases(lora_setup):
    task, e_prev, e_mid, mid, hashes, adapted, hist = lora_setup
    images = task.images[task.train_idx]
    init_gap = pipeline.refine_gap(lora.inject(e_prev, 2, 9), e_mid, images)
    with nx.no_grad():
        raw_gap = losses.refine_loss(nn.forward_features(e_prev, images), nn.forward_features(e_mid, images)).item()
    assert init_gap == pytest.approx(raw_gap, rel=1e-6)
    assert pipeline.refine_gap(adapted, e_mid, images) < init_gap
    windows = np.array(hist).reshape(-1, 40).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_lora_kd_identical_teachers_stay_at_zero(lora_setup):
    task, e_prev, *_ = lora_setup
    adapted, hist = lora_kd(e_prev, e_prev, task, 2, 20, 5e-3, seed=9, batch=4)
    assert hist[0] == 0.0 and hist[-1] <= hist[0]
    merged = lora.merge(adapted)
    frob = np.sqrt(sum(((merged[p + ".weight"].data - e_prev[p + ".weight"].data) ** 2).sum()
                       for p in encoder_linear_layers(e_prev.meta)))
    assert frob < 1e-3


def test_lora_kd_architecture_mismatch(lora_setup):
    task, e_prev, *_ = lora_setup
    other = nn.init_model(dataclasses.replace(SMALL_ARCH, channel_hidden=10), 0)
    with pytest.raises(ConfigError):
        lora_kd(e_prev, other, task, 2, 1, 1e-3, seed=0)


def test_reparameterize_properties(lora_setup):
    task, e_prev, e_mid, mid, hashes, adapted, hist = lora_setup
    m_t = reparameterize(adapted, mid)
    assert m_t.param_count() == mid.param_count()
    for group in ("decoder", "seg_head", "ssl_head"):
        for k, v in mid.group(group).items():
            assert np.array_equal(m_t[k].data, v.data), k
    images = task.images[:4]
    with nx.no_grad():
        merged = nn.forward_features(m_t, images).values.data
        direct = lora.adapted_forward(adapted, images).values.data
    assert np.abs(merged - direct).max() <= 1e-5 * (1 + np.abs(direct).max())
    zero = reparameterize(lora.inject(e_prev, 2, 4), mid)
    assert ckpt.params_hash(zero.group("encoder")) == ckpt.params_hash(e_prev.group("encoder"))


# --- sequences ---------------------------------------------------------------------------------
def test_fft_parallel_starts_every_task_from_m0(reports, ctx):
    report = reports["fft_parallel"]
    cfg = tiny_config(strategy="fft_parallel")
    for t, task in enumerate(ctx.tasks):
        start = started(ctx.m0, task, stage_seed(cfg.master_seed, "head", t))
        assert report.tasks[t].m_init == model_hash(start)
        solo, _ = kd_fft(start, task, cfg, stage_seed(cfg.master_seed, "fft", t))
        assert model_hash(solo) == report.tasks[t].m_mid == report.tasks[t].m_final


def test_vanilla_chains_previous_model(reports, ctx):
    report = reports["seqft_vanilla"]
    cfg = tiny_config()
    start = started(report.models[0], ctx.tasks[1], stage_seed(cfg.master_seed, "head", 1))
    assert report.tasks[1].m_init == model_hash(start)
    assert report.tasks[0].buffer_after == []


def test_strategies_sharing_a_prefix_share_the_first_stage(reports):
    mids = {name: r.tasks[0].m_mid for name, r in reports.items()}
    assert len(set(mids.values())) == 1


def test_medseqft_teachers_frozen(reports):
    for rec in reports["medseqft"].tasks:
        assert rec.teacher_hash_before == rec.teacher_hash_after
        assert rec.mid_hash_before == rec.mid_hash_after


def test_merge_scope_after_sequence(reports, ctx):
    report = reports["medseqft"]
    prevs = [ctx.m0] + report.models[:-1]
    linear = {p + ".weight" for p in encoder_linear_layers(ctx.m0.meta)}
    for prev, m_t in zip(prevs, report.models):
        rows = metrics.param_variation(prev.group("encoder"), m_t.group("encoder")).layers
        for row in rows:
            if row.name not in linear:
                assert row.mean_abs_change == 0.0 and row.changed_fraction == 0.0, row.name
        assert any(row.mean_abs_change > 0 for row in rows if row.name in linear)


def test_buffer_contents(reports, ctx):
    cfg = tiny_config()
    mds = reports["medseqft"].tasks
    assert [len(r.buffer_after) for r in mds] == [cfg.k, 2 * cfg.k]
    expected = mds_select(None, ctx.tasks[0], cfg.k, cfg.mds_runs, 0, ctx.scores(ctx.tasks[0]))
    assert [e["index"] for e in mds[0].buffer_after] == [e.index for e in expected]
    rand = reports["seqft_random_buffer"].tasks
    assert [len(r.buffer_after) for r in rand] == [cfg.k, 2 * cfg.k]
    # the K&G-only ablation draws its buffer exactly like the random-buffer row
    assert reports["seqft_kgrft_only"].tasks[-1].buffer_after == rand[-1].buffer_after


def test_single_task_medseqft_is_fft_lora_merge(ctx):
    cfg = tiny_config(strategy="medseqft", tasks=tiny_config().tasks[:1])
    report = run_sequence(cfg, StageStore(), ctx=None)
    assert len(report.tasks) == 1 and report.transfer.n == 1
    task = report_ctx_task = generate_task(dataclasses.replace(cfg.tasks[0], seed=0))
    m0 = report.m0
    start = started(m0, report_ctx_task, stage_seed(0, "head", 0))
    mid, _ = kd_fft(start, task, cfg, stage_seed(0, "fft", 0))
    lseed = stage_seed(0, "lora", 0)
    adapted, _ = lora_kd(pipeline._freeze(m0), pipeline._freeze(mid), task, 2, cfg.iters_lora_kd, cfg.lr_lora, lseed,
                         cfg.batch)
    assert model_hash(reparameterize(adapted, mid)) == report.tasks[0].m_final


def test_report_rows_and_diagonal(reports, ctx):
    report = reports["medseqft"]
    rows = report.metric_rows()
    assert [r[:4] for r in rows] == [
        ("medseqft", "a_disk", "a_disk", "M_t"),
        ("medseqft", "a_disk", "a_disk", "M_t-mid"),
        ("medseqft", "b_bar", "b_bar", "M_t"),
        ("medseqft", "b_bar", "b_bar", "M_t-mid"),
        ("medseqft", "b_bar", "a_disk", "M_t"),
    ]
    for t, task in enumerate(ctx.tasks):
        assert report.transfer.dice[t][t] == metrics.evaluate(report.models[t], task).mean_dice
        assert report.final[t].mean_dice == report.transfer.dice[t][t]
    summary = pipeline.summarize(pipeline.parse_metric_rows(pipeline.format_metric_rows(rows)))
    assert summary[0].bwt == pytest.approx(report.transfer.bwt(), abs=2e-6)
    assert summary[0].dice == pytest.approx(report.mean_final_dice, abs=2e-6)


def test_resume_from_stage_store_is_bit_identical(tmp_path):
    cfg = tiny_config(strategy="medseqft")
    first = run_sequence(cfg, StageStore(tmp_path / "stages"))
    files = sorted(p.name for p in (tmp_path / "stages").iterdir())
    again = run_sequence(cfg, StageStore(tmp_path / "stages"))
    fresh = run_sequence(cfg, StageStore())
    assert sorted(p.name for p in (tmp_path / "stages").iterdir()) == files
    for a, b, c in zip(first.tasks, again.tasks, fresh.tasks):
        assert a.m_final == b.m_final == c.m_final
    assert pipeline.format_metric_rows(first.metric_rows()) == pipeline.format_metric_rows(fresh.metric_rows())


def test_calibration_touches_decoder_and_head_only(ctx):
    cfg = tiny_config(strategy="seqft_vanilla", calibrate_decoder=True, iters_calibrate=3)
    task = ctx.tasks[0]
    model = started(ctx.m0, task)
    out = pipeline.calibrate_decoder(model, task, cfg, seed=0)
    for k, v in model.params.items():
        same = np.array_equal(out[k].data, v.data)
        assert same == (not k.startswith(("decoder", "seg_head"))), k


# --- experiments -------------------------------------------------------------------------------
def test_experiment_round_trip_and_validation():
    exp = Experiment.from_dict({**tiny_config().to_dict(), "strategies": ["medseqft"], "seeds": [0, 2]})
    assert exp.runs() == [("medseqft", 0), ("medseqft", 2)]
    assert Experiment.from_dict(exp.to_dict()) == exp
    with pytest.raises(ConfigError):
        Experiment(tiny_config(), ["medseqft", "medseqft"], [0]).validate()
    with pytest.raises(ConfigError):
        Experiment(tiny_config(), [], [0]).validate()


def test_run_experiment_outputs_and_resume(tmp_path):
    exp = Experiment(tiny_config(), ["seqft_vanilla", "medseqft"], [0])
    rows = pipeline.run_experiment(exp, tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0] == ",".join(pipeline.METRICS_HEADER)
    assert len(rows) == 10
    run_dir = tmp_path / "runs" / "medseqft" / "seed0"
    assert (run_dir / "transfer.csv").read_text().splitlines()[0] == "model_t,task_s,dice,hd95"
    assert {p.name for p in run_dir.glob("*.sqft")} == {
        f"task{t}_{name}.{tag}.sqft" for t, name in ((1, "a_disk"), (2, "b_bar")) for tag in ("mid", "final", "adapters")
    }
    with pytest.raises(ConfigError, match="resume"):
        pipeline.run_experiment(exp, tmp_path)
    with pytest.raises(ConfigError, match="differs"):
        pipeline.run_experiment(Experiment(tiny_config(k=2), exp.strategies, exp.seeds), tmp_path, resume=True)
    (tmp_path / "metrics.csv").unlink()
    pipeline.run_experiment(exp, tmp_path, resume=True)
    assert (tmp_path / "metrics.csv").read_text() == text
