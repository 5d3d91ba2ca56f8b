"""Bundled synthetic fixtures: paths and loaders."""

from importlib import resources

from .data import Interaction, Schema, load_interactions, load_schemas


def fixture_path(name: str) -> str:
    return str(resources.files("convsql").joinpath("fixtures", name))


def load_fixture_schemas() -> dict[str, Schema]:
    return load_schemas(fixture_path("schemas.json"))


def load_train_interactions(schemas=None) -> list[Interaction]:
    schemas = schemas if schemas is not None else load_fixture_schemas()
    return load_interactions(fixture_path("train_interactions.json"), schemas)


def load_corpus() -> list[tuple[str, str]]:
    """(db_id, sql) pairs from the round-trip corpus, one per line."""
    out = []
    with open(fixture_path("sql_corpus.txt"), "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            db_id, sql = line.split("|", 1)
            out.append((db_id, sql))
    return out


def load_eval_pairs() -> list[dict]:
    import json

    with open(fixture_path("eval_pairs.json"), "r", encoding="utf-8") as f:
        return json.load(f)
