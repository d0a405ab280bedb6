import numpy as np
import pytest
import torch

from demspec.corpus import LabeledDocument
from demspec.model import EncoderConfig

torch.set_num_threads(2)


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(vocab_size=64, hidden_dim=32, num_layers=1, num_heads=2,
                         feedforward_dim=32, max_seq_len=16, dropout=0.0)


def make_doc(i, gender=None, age_group=None, rating=None, topic=None,
             text=None, country="US", language="en", domain_tag="reviews"):
    return LabeledDocument(
        id=f"d{i:05d}", text=text or f"tok{i % 7} tok{i % 11} tok{i % 13}",
        country=country, language=language, gender=gender, age_group=age_group,
        rating=rating, topic=topic, domain_tag=domain_tag)


def make_balanced_docs(n_per_class, dimension="gender", **kwargs):
    from demspec.corpus import dimension_classes
    classes = dimension_classes(dimension)
    docs = []
    for i in range(2 * n_per_class):
        cls = classes[i % 2]
        field = {"gender": {"gender": cls}, "age": {"age_group": cls}}[dimension]
        docs.append(make_doc(i, rating=[1, 3, 5][i % 3], topic=f"t{i % 5}",
                             **field, **kwargs))
    return docs


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = []
    for name, module in sys.modules.items():
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(module, "VERDICTS", [])
            break
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
