#!/usr/bin/env python3
"""Regenerate the committed toy fixtures under tests/fixtures/.

Layout:
    train/subjects/subj0/*.png       20 images of the training subject (age 45)
    train/reg/<agegroup>/<id>_<n>.png  6 reg subjects x 6 groups x 2 images
    train/manifest.json
Deterministic: rerunning produces byte-identical files.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from agedit.data import save_image
from agedit.prompts import CAPTION_VOCABULARY
from agedit.toyfaces import GROUP_AGES, face_image

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"

TRAIN_SUBJECT = "subj0"
TRAIN_AGE = 45.0
N_TRAIN = 20
REG_SUBJECTS = [f"reg{i}" for i in range(1, 7)]
IMAGES_PER_GROUP_PER_SUBJECT = 2


def main() -> None:
    train_dir = FIXTURES / "train"
    subj_dir = train_dir / "subjects" / TRAIN_SUBJECT
    subj_dir.mkdir(parents=True, exist_ok=True)

    training_images = []
    for i in range(N_TRAIN):
        rel = f"subjects/{TRAIN_SUBJECT}/{i:02d}.png"
        save_image(face_image(TRAIN_SUBJECT, TRAIN_AGE, variation=i), train_dir / rel)
        training_images.append(rel)

    regularization = []
    for caption in CAPTION_VOCABULARY:
        group_dir = train_dir / "reg" / caption
        group_dir.mkdir(parents=True, exist_ok=True)
        age = GROUP_AGES[caption]
        for sid in REG_SUBJECTS:
            for n in range(IMAGES_PER_GROUP_PER_SUBJECT):
                rel = f"reg/{caption}/{sid}_{n}.png"
                save_image(face_image(sid, age, variation=n), train_dir / rel)
                regularization.append({"path": rel, "caption": caption, "subject_id": sid})

    manifest = {
        "training": {"subject_id": TRAIN_SUBJECT, "images": training_images},
        "regularization": regularization,
    }
    (train_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {N_TRAIN} training and {len(regularization)} regularization images "
          f"under {train_dir}")


if __name__ == "__main__":
    main()
