"""Writes tiny randomly initialised hub-format checkpoints and the outputs
the reference implementation produces for them. The Rust tests load the
same directories and must reproduce those outputs.

    python3 make_checkpoints.py   # run from this directory
"""

import json
import os

import torch
from transformers import (
    BertConfig,
    BertForMaskedLM,
    BertForSequenceClassification,
    BertModel,
    BertTokenizer,
    DistilBertConfig,
    DistilBertForMaskedLM,
    DistilBertForSequenceClassification,
    DistilBertModel,
)

HERE = os.path.dirname(os.path.abspath(__file__))

WORDS = """i am fine today feel sad tired cannot sleep at night my doctor put me on
sertraline and it helps a bit the week was long hope help happy good bad
really so not work friends home again still always very much to be""".split()
PIECES = ["##s", "##ing", "##ed", "##ly", "##er", "un", "##happy", "##ness"]
PUNCT = list(".,!?'-")
VOCAB = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + WORDS + PIECES + PUNCT

SENTENCES = [
    "i am fine today",
    "I can't sleep at night, really TIRED!",
    "my doctor put me on sertraline and it helps a bit",
    "unhappiness feelings weeks",
    "café naïve résumé",
]

MASKED = [
    ("i [MASK] fine today", 2),
    ("my doctor put me on [MASK] and it helps", 6),
]

LABELS = ["negative", "neutral", "positive"]


def small(cls, **kw):
    return cls(vocab_size=len(VOCAB), max_position_embeddings=64, **kw)


def write_vocab(path):
    with open(os.path.join(path, "vocab.txt"), "w") as f:
        f.write("\n".join(VOCAB) + "\n")


def hidden_cls(model, enc):
    with torch.no_grad():
        out = model(**enc, output_hidden_states=True)
    # index 0 is the embedding output; only block outputs are layers
    return [h[:, 0, :].tolist() for h in out.hidden_states[1:]]


def dump(arch, cfg, mlm_cls, clf_cls, base_cls, seed):
    torch.manual_seed(seed)
    root = os.path.join(HERE, arch)
    expected = {}

    mlm_dir = os.path.join(root, "mlm")
    mlm = mlm_cls(cfg).eval()
    mlm.save_pretrained(mlm_dir, safe_serialization=True)
    write_vocab(mlm_dir)
    tok = BertTokenizer(os.path.join(mlm_dir, "vocab.txt"), do_lower_case=True)

    encodings = [tok(s)["input_ids"] for s in SENTENCES]
    expected["input_ids"] = encodings
    base = base_cls.from_pretrained(mlm_dir).eval()
    expected["cls_by_layer"] = [
        hidden_cls(base, {"input_ids": torch.tensor([ids])}) for ids in encodings
    ]
    batch = tok(SENTENCES, padding=True, return_tensors="pt")
    batch.pop("token_type_ids", None)
    expected["batch_cls_by_layer"] = hidden_cls(base, batch)

    masked = []
    for text, pos in MASKED:
        ids = tok(text, return_tensors="pt")
        assert ids["input_ids"][0, pos].item() == tok.mask_token_id
        with torch.no_grad():
            logits = mlm(**ids).logits[0, pos]
        masked.append(
            {
                "context": text.replace("[MASK]", "").split(),
                "slot": text.split().index("[MASK]"),
                "logits": logits.tolist(),
            }
        )
    expected["masked"] = masked

    clf_dir = os.path.join(root, "classifier")
    cfg.id2label = {i: l.upper() for i, l in enumerate(LABELS)}
    cfg.label2id = {l.upper(): i for i, l in enumerate(LABELS)}
    clf = clf_cls(cfg).eval()
    clf.save_pretrained(clf_dir, safe_serialization=True)
    write_vocab(clf_dir)
    probs = []
    for s in SENTENCES:
        with torch.no_grad():
            logits = clf(**tok(s, return_tensors="pt")).logits[0]
        probs.append(torch.softmax(logits, -1).tolist())
    expected["classifier_probs"] = probs

    with open(os.path.join(root, "expected.json"), "w") as f:
        json.dump({"sentences": SENTENCES, **expected}, f)


if __name__ == "__main__":
    distil = small(
        DistilBertConfig, dim=16, n_heads=2, hidden_dim=32, n_layers=3, initializer_range=0.2
    )
    dump("distilbert", distil, DistilBertForMaskedLM, DistilBertForSequenceClassification, DistilBertModel, 0)
    bert = small(
        BertConfig,
        hidden_size=16,
        num_attention_heads=2,
        intermediate_size=32,
        num_hidden_layers=3,
        initializer_range=0.2,
    )
    dump("bert", bert, BertForMaskedLM, BertForSequenceClassification, BertModel, 1)
