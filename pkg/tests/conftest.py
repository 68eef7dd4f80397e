import json
from pathlib import Path

import pytest
import torch

from ogan.ontology import Ontology, load_ontology

ROOT = Path(__file__).resolve().parents[1]
EXAMPLE_ONTOLOGY = ROOT / "data" / "ontology.example.json"


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def ontology() -> Ontology:
    return load_ontology(EXAMPLE_ONTOLOGY)


@pytest.fixture
def tiny_ontology() -> Ontology:
    return Ontology(("TOPS", "BOTTOMS"), (("tshirt", 0), ("hoodie", 0), ("jeans", 1)))


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# acceptance criteria report one line each; they are echoed again at the end of the run
ACCEPTANCE_LINES: list[str] = []
ACCEPTANCE_EXTRA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES and not ACCEPTANCE_EXTRA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
    for block in ACCEPTANCE_EXTRA:
        terminalreporter.write_line("")
        for line in block.splitlines():
            terminalreporter.write_line(line)
