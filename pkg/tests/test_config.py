import json

import pytest

from cytosynth.config import SCHEMA, cv_plan, load_document, parse_override, toy_spec, train_config
from cytosynth.errors import ConfigError


def test_override_types():
    assert parse_override("use_sgc=false") == ("use_sgc", False)
    assert parse_override("batch_size=8") == ("batch_size", 8)
    assert parse_override("lr=1e-3") == ("lr", 1e-3)
    assert parse_override("augment=color") == ("augment", "color")
    for bad in ["batch_size=8.5", "use_sgc=maybe", "nokey", "unknown=1"]:
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_document_and_targets(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lr": 1, "images_per_class": 50, "clf_epochs": 3, "toy_seed": 4}))
    values = load_document(p, ["lr=0.002"])
    assert train_config(values).lr == 0.002
    plan = cv_plan(values)
    assert plan.images_per_class == 50 and plan.classifier.epochs == 3
    assert toy_spec(values).seed == 4


def test_document_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lr": "fast"}))
    with pytest.raises(ConfigError):
        load_document(p)
    p.write_text(json.dumps({"mystery": 1}))
    with pytest.raises(ConfigError, match="mystery"):
        load_document(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_document(p)
    with pytest.raises(ConfigError):
        load_document(tmp_path / "absent.json")


def test_schema_covers_all_groups():
    targets = {v[0] for v in SCHEMA.values()}
    assert targets == {"train", "plan", "classifier", "toy"}
