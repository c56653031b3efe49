import pytest
import torch

from mcsql.data_model import Agg, Condition, Example, Op, SQLQuery, TableData, TableSchema
from mcsql.encoder import EncoderConfig
from mcsql.parser import Parser
from mcsql.submodules import ModelConfig


def toy_table() -> TableData:
    schema = TableSchema("toy", ("player", "nationality", "points", "school team"),
                         ("text", "text", "real", "text"))
    rows = (("Kim Min", "Son", 12.0, "Duke"),
            ("Lee Dae", "Korea", 7.0, "Ohio State"),
            ("Park Ho", "Son", 3.0, "Duke"))
    return TableData(schema, rows)


def toy_examples() -> list[Example]:
    return [
        Example("which player is from son ?", "toy", SQLQuery(0, Agg.NONE, (Condition(1, Op.EQ, "son"),))),
        Example("how many points for ohio state ?", "toy",
                SQLQuery(2, Agg.SUM, (Condition(3, Op.EQ, "ohio state"),))),
        Example("what player has more than 5 points and school team duke ?", "toy",
                SQLQuery(0, Agg.NONE, (Condition(2, Op.GT, "5"), Condition(3, Op.EQ, "duke")))),
        Example("how many players ?", "toy", SQLQuery(0, Agg.COUNT, ())),
    ]


def tiny_config(seed=0, no_tc=False, no_vl=False, d=4, d_e=8, d_t=4, encoder="transformer") -> ModelConfig:
    enc = EncoderConfig(d=d, d_e=d_e, d_t=d_t, bilstm_layers=1, context_encoder=encoder, context_layers=1,
                        context_heads=2, max_len=64)
    return ModelConfig(encoder=enc, no_tc=no_tc, no_vl=no_vl, seed=seed)


def tiny_parser(dtype=torch.float32, **kw) -> Parser:
    table = toy_table()
    parser = Parser.build(tiny_config(**kw), toy_examples(), {"toy": table}, min_count=1)
    parser.model.to(dtype)
    return parser


@pytest.fixture
def table():
    return toy_table()


@pytest.fixture
def tables():
    return {"toy": toy_table()}


@pytest.fixture
def examples():
    return toy_examples()


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion after the run

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture
def detail(request):
    """Record a one-line measurement for the acceptance summary."""
    marker = request.node.get_closest_marker("criterion")
    entry = CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "details": [], "outcomes": []})

    def add(text: str):
        entry["details"].append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "details": [], "outcomes": []})
    entry["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        entry = CRITERIA[n]
        ok = entry["outcomes"] and all(o == "passed" for o in entry["outcomes"])
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
