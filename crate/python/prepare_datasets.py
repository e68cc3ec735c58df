"""Convert the public source tables into the CSV layout the schemas expect.

    python python/prepare_datasets.py --hcv hcvdat0.csv --heart heart.csv --out data

Sources:
  * HCV data (UCI repository, ``hcvdat0.csv``): blood donors and suspect
    blood donors become class 0; hepatitis, fibrosis and cirrhosis become
    class 1. Rows with any missing laboratory value are dropped (589 remain).
  * Heart failure prediction (``heart.csv``, 918 rows): the single row with
    a resting blood pressure of 0 is dropped (917 remain).

Each output gets an ``id`` column so that extracted tables can be joined to
it row by row.
"""

import argparse
from pathlib import Path

import pandas as pd

HCV_LABS = ["ALB", "ALP", "ALT", "AST", "BIL", "CHE", "CHOL", "CREA", "GGT", "PROT"]

HEART_COLUMNS = {
    "Age": "age",
    "Sex": "sex",
    "ChestPainType": "chest_pain_type",
    "RestingBP": "resting_bp",
    "Cholesterol": "cholesterol",
    "FastingBS": "fasting_bs",
    "RestingECG": "resting_ecg",
    "MaxHR": "max_hr",
    "ExerciseAngina": "exercise_angina",
    "Oldpeak": "oldpeak",
    "ST_Slope": "st_slope",
    "HeartDisease": "HeartDisease",
}


def prepare_hcv(src: Path) -> pd.DataFrame:
    raw = pd.read_csv(src, index_col=0)
    raw = raw.dropna(subset=HCV_LABS).reset_index(drop=True)
    code = raw["Category"].str.split("=", n=1).str[0]
    out = pd.DataFrame({"id": [f"hcv{i:04d}" for i in range(len(raw))]})
    out["age"] = raw["Age"].astype(int)
    out["sex"] = raw["Sex"].str.lower()
    for col in HCV_LABS:
        out[col] = raw[col].astype(float)
    out["category"] = (~code.isin(["0", "0s"])).astype(int)
    return out


def prepare_heart(src: Path) -> pd.DataFrame:
    raw = pd.read_csv(src)
    raw = raw[raw["RestingBP"] > 0].reset_index(drop=True)
    out = raw.rename(columns=HEART_COLUMNS)[list(HEART_COLUMNS.values())]
    out.insert(0, "id", [f"heart{i:04d}" for i in range(len(out))])
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--hcv", type=Path, help="path to hcvdat0.csv")
    ap.add_argument("--heart", type=Path, help="path to the 918-row heart.csv")
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args()
    if not (args.hcv or args.heart):
        ap.error("give --hcv and/or --heart")
    args.out.mkdir(parents=True, exist_ok=True)
    if args.hcv:
        df = prepare_hcv(args.hcv)
        df.to_csv(args.out / "hepatitis.csv", index=False)
        print(f"hepatitis.csv: {len(df)} rows, {int(df['category'].sum())} positive")
    if args.heart:
        df = prepare_heart(args.heart)
        df.to_csv(args.out / "heart.csv", index=False)
        print(f"heart.csv: {len(df)} rows, {int(df['HeartDisease'].sum())} positive")


if __name__ == "__main__":
    main()
