import numpy as np
import pytest

from lsp_kit.baselines import memory_estimate
from lsp_kit.bench import (BenchConfig, BenchRow, GradientCorpus, bench_grid, gradient_corpus,
                           run_bench, summarize, write_rows)
from lsp_kit.errors import ContractError
from lsp_kit.projector import FitConfig
from lsp_kit.toy_models import SyntheticTask

TASK = SyntheticTask(n_in=16, hidden=16, n_out=16, n_train=256, n_eval=64)
CFG = BenchConfig(ds=[2, 4, 8, 16], rs=[2], fit=FitConfig(alpha=0.05, max_steps=60,
                                                          timeout_steps=60))


@pytest.fixture(scope="module")
def corpus():
    return gradient_corpus(TASK, seed=0, warmup_steps=50, n_calib=4, n_heldout=4)


def test_corpus_shapes(corpus):
    assert corpus.n_layers == 3 and corpus.shapes() == [(16, 16)] * 3
    assert all(len(c) == 4 for c in corpus.calib) and all(len(h) == 4 for h in corpus.heldout)
    again = gradient_corpus(TASK, seed=0, warmup_steps=50, n_calib=4, n_heldout=4)
    assert all(np.array_equal(a, b) for a, b in zip(corpus.heldout[2], again.heldout[2]))


def test_grid_includes_full_row_and_equal_memory_galore():
    grid = bench_grid(CFG, [(16, 16)] * 3)
    assert grid[0] == ("full", 16, 1)
    k = [d for m, d, _ in grid if m == "galore"]
    assert len(k) == 1
    lsp_extra = memory_estimate("lsp", 16, 16, 2).extra
    assert memory_estimate("galore", 16, 16, k[0]).extra <= lsp_extra
    assert bench_grid(CFG, [(16, 8)])[0][0] != "full"


def test_bench_rows(corpus, tmp_path):
    rows = run_bench(corpus, CFG)
    assert len(rows) == len(bench_grid(CFG, corpus.shapes()))
    assert rows[0].method == "full" and rows[0].heldout_bias == pytest.approx(0.0, abs=1e-12)
    lsp, rnd = summarize(rows, "lsp"), summarize(rows, "random")
    assert all(lsp[d] < rnd[d] for d in lsp)
    assert summarize(rows, "lsp", "train_bias")[16] <= lsp[2]
    write_rows(tmp_path / "b.csv", rows)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == ",".join(BenchRow.FIELDS) and len(lines) == 1 + len(rows)


def test_empty_corpus_rejected():
    with pytest.raises(ContractError):
        run_bench(GradientCorpus([], []), CFG)
    with pytest.raises(ContractError):
        run_bench(GradientCorpus([[]], [[]]), CFG)
    with pytest.raises(ContractError):
        gradient_corpus(TASK, n_calib=0)
