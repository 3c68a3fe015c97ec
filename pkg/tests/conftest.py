import dataclasses

import pytest

from pssl.pipeline import ModelSection, PreparedLog, RunConfig, mine_all
from pssl.pretrain import PretrainConfig
from pssl.ranker import FinetuneConfig
from pssl.synth import SynthConfig, generate_log

SMALL_SYNTH = SynthConfig(n_users=24, queries_per_user=24, n_topics=4, words_per_topic=12,
                          docs_per_topic=10, seed=11)


def small_run_config(seed: int = 0) -> RunConfig:
    model = ModelSection(preset="desk", emb_dim=8, hidden=16, heads=2, layers=1, ff_dim=16,
                         mlp_units=8, max_sentence_len=8, max_long=12, max_short=6)
    return RunConfig(seed=seed, model=model,
                     pretrain=PretrainConfig(batch_size=4, steps=6, seed=seed),
                     finetune=FinetuneConfig(steps=12, batch_events=4, eval_every=5, seed=seed))


@pytest.fixture(scope="session")
def small_synth():
    return generate_log(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_log(small_synth):
    return PreparedLog.build(small_synth.corpus, small_synth.events)


@pytest.fixture(scope="session")
def small_pairs(small_log):
    return mine_all(small_log, small_run_config())


@pytest.fixture
def small_cfg():
    return small_run_config()


def with_pretrain(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, **kw))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
