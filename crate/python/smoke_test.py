"""End-to-end smoke test of the `temed` extension module.

Build and install first, for example:

    maturin build --release -o dist && pip install dist/temed-*.whl
    python python/smoke_test.py
"""

import csv
import json
import random
import tempfile
from pathlib import Path

import temed

ROOT = Path(__file__).resolve().parent.parent


def synthetic_heart_csv(path, n=80, seed=7):
    rng = random.Random(seed)
    names = temed.Schema.load(ROOT / "schemas" / "heart.schema.json").names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *names, "HeartDisease"])
        for i in range(n):
            sick = i % 3 == 0
            row = {
                "age": rng.randint(35, 80),
                "sex": rng.choice("MF"),
                "chest_pain_type": "ASY" if sick else rng.choice(["ATA", "NAP", "TA"]),
                "resting_bp": rng.randint(100, 170),
                "cholesterol": rng.randint(150, 320),
                "fasting_bs": rng.choice("01"),
                "resting_ecg": rng.choice(["Normal", "ST", "LVH"]),
                "max_hr": rng.randint(90, 190),
                "exercise_angina": "Y" if sick else "N",
                "oldpeak": round(rng.uniform(0, 3), 1),
                "st_slope": "Flat" if sick else "Up",
            }
            w.writerow([f"p{i}", *(row[k] for k in names), int(sick)])


def main():
    schema = temed.Schema.load(ROOT / "schemas" / "heart.schema.json")
    assert len(schema) == 11 and schema.label == "HeartDisease"
    assert json.loads(schema.json_schema_block())["properties"]["st_slope"]
    assert schema.canonicalize("age", "58") == 58
    assert schema.canonicalize("age", "n/a") is None

    text, actions = temed.repair_json("```json\n{'age': 58, 'oldpeak': NaN,}\n```")
    assert json.loads(text) == {"age": 58, "oldpeak": None}, text
    assert actions[0] == "strip_code_fence", actions

    templates = temed.Templates.load(ROOT / "templates" / "heart", schema)
    report = "A 61 year old man with exertional chest pressure."
    prompt = templates.render(schema, report)
    assert prompt.endswith(report)
    assert templates.render(schema, report, reasoning=False) != prompt

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        full = {n: None for n in schema.names}
        script = [
            {"match_substring": "CASE-A", "response": json.dumps({**full, "age": 61})},
            {"match_substring": "CASE-B", "response": "{\"age\": \"sixty\"}"},
            {"match_substring": "CASE-B", "response": json.dumps({**full, "age": 60, "sex": "F"})},
        ]
        (tmp / "replay.json").write_text(json.dumps(script))
        reports = [{"id": "a", "text": "CASE-A " + report}, {"id": "b", "text": "CASE-B sixty year old woman"}]
        out = temed.extract(schema, templates, reports, tmp / "replay.json", parallelism=2)
        assert [r["source_id"] for r in out["records"]] == ["a", "b"]
        assert out["records"][1]["values"]["sex"] == "F"
        assert out["stats"]["vorc_call_rate"] == 0.5, out["stats"]

        synthetic_heart_csv(tmp / "heart.csv")
        data = temed.Dataset.load_csv(tmp / "heart.csv", schema)
        assert len(data) == 80
        assert data.labels[:4] == [1, 0, 0, 1]
        parts = data.split(3)
        assert sorted(parts["train"] + parts["val"] + parts["test"]) == list(range(80))

        model = temed.train(data, "dtree", seed=3)
        assert model.family == "dtree" and len(model.grid()["candidates"]) == 18
        test_metrics = model.score(data, parts["test"])
        assert test_metrics["accuracy"] == 1.0, test_metrics
        top = max(model.feature_importances(), key=lambda kv: kv[1])[0]
        assert top.startswith(("st_slope", "exercise_angina", "chest_pain_type")), top
        probs = model.predict_proba(data)
        assert temed.auc(data.labels, probs) == 1.0
        model.save(tmp / "dtree_model.json")
        assert json.loads((tmp / "dtree_model.json").read_text())["seed"] == 3

        assert temed.extraction_metrics(data, data)["cell_accuracy"] == 1.0
        lines = (tmp / "heart.csv").read_text().splitlines(keepends=True)
        (tmp / "first10.csv").write_text("".join(lines[:11]))
        first10 = temed.Dataset.load_csv(tmp / "first10.csv", schema)
        partial = temed.extraction_metrics(data, first10)
        assert partial["n_evaluated"] == 10 and partial["n_missing_rows"] == 70, partial
        reports = temed.compare(data, data, families=["logreg", "dtree"], seed=3)
        fidelity = {r["name"]: r["report"] for r in reports if r["kind"] == "fidelity"}
        assert all(f["acc_d"] == 0.0 for f in fidelity.values()), fidelity
        assert "fidelity_dtree" in temed.compare(data, data, families=["dtree"], format="csv")

    print(f"temed {temed.__version__} smoke test passed")


if __name__ == "__main__":
    main()
