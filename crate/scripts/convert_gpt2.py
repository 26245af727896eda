#!/usr/bin/env python3
"""Convert a Hugging Face GPT-2 checkpoint into an RPWT weight container.

Two modes:

  convert  --model gpt2 --out DIR
      Writes DIR/model.rpwt, DIR/tokenizer/{vocab.json,merges.txt},
      DIR/reference_logits.json (last-position logits for five prompts,
      computed by the Hugging Face implementation) and DIR/facts.jsonl
      (short factual queries for the knockout smoke test). `--model` may be a
      hub name or a local directory produced by `save_pretrained`.

  fixture  --out DIR [--seed 0]
      Writes a tiny randomly initialised GPT-2 (2 layers, d=16, 64-token
      vocabulary) with perturbed parameters, plus reference logits for every
      position of a few fixed token sequences. Used by the engine tests as an
      independent implementation to compare against.

Requires torch and transformers. The container layout matches the Rust
writer byte for byte, so `write(read(f)) == f` holds for converted files.
"""

import argparse
import json
import os
import struct
import sys

import numpy as np

MAGIC = b"RPWT"
VERSION = 1
ALIGNMENT = 64

PROMPTS = [
    "The Eiffel Tower is located in the city of",
    "Beats Music is owned by",
    "The capital of Japan is",
    "Michael Jordan plays the sport of",
    "The official language of Brazil is",
]

# subject must occur verbatim in the query
FACTS = [
    ("The Eiffel Tower is located in the city of", "The Eiffel Tower", "Paris"),
    ("The Colosseum is located in the city of", "The Colosseum", "Rome"),
    ("The Statue of Liberty is located in the city of", "The Statue of Liberty", "New York"),
    ("Big Ben is located in the city of", "Big Ben", "London"),
    ("The Brandenburg Gate is located in the city of", "The Brandenburg Gate", "Berlin"),
    ("The capital of France is", "France", "Paris"),
    ("The capital of Italy is", "Italy", "Rome"),
    ("The capital of Germany is", "Germany", "Berlin"),
    ("The capital of Spain is", "Spain", "Madrid"),
    ("The capital of Japan is", "Japan", "Tokyo"),
    ("The capital of Russia is", "Russia", "Moscow"),
    ("The capital of England is", "England", "London"),
    ("The capital of Egypt is", "Egypt", "Cairo"),
    ("The capital of Greece is", "Greece", "Athens"),
    ("The capital of Ireland is", "Ireland", "Dublin"),
    ("The capital of Austria is", "Austria", "Vienna"),
    ("The capital of China is", "China", "Beijing"),
    ("The capital of Canada is", "Canada", "Ottawa"),
    ("The capital of Australia is", "Australia", "Canberra"),
    ("The capital of Thailand is", "Thailand", "Bangkok"),
    ("The official language of France is", "France", "French"),
    ("The official language of Germany is", "Germany", "German"),
    ("The official language of Italy is", "Italy", "Italian"),
    ("The official language of Spain is", "Spain", "Spanish"),
    ("The official language of Japan is", "Japan", "Japanese"),
    ("The official language of Russia is", "Russia", "Russian"),
    ("The official language of Brazil is", "Brazil", "Portuguese"),
    ("The official language of Mexico is", "Mexico", "Spanish"),
    ("The official language of China is", "China", "Chinese"),
    ("The official language of Greece is", "Greece", "Greek"),
    ("The mother tongue of Vladimir Putin is", "Vladimir Putin", "Russian"),
    ("The mother tongue of Emmanuel Macron is", "Emmanuel Macron", "French"),
    ("The mother tongue of Angela Merkel is", "Angela Merkel", "German"),
    ("The mother tongue of Silvio Berlusconi is", "Silvio Berlusconi", "Italian"),
    ("Michael Jordan plays the sport of", "Michael Jordan", "basketball"),
    ("Tiger Woods plays the sport of", "Tiger Woods", "golf"),
    ("Roger Federer plays the sport of", "Roger Federer", "tennis"),
    ("Serena Williams plays the sport of", "Serena Williams", "tennis"),
    ("Lionel Messi plays the sport of", "Lionel Messi", "soccer"),
    ("Wayne Gretzky plays the sport of", "Wayne Gretzky", "hockey"),
    ("Tom Brady plays the sport of", "Tom Brady", "football"),
    ("Babe Ruth played the sport of", "Babe Ruth", "baseball"),
    ("iPhone is a product made by", "iPhone", "Apple"),
    ("Windows is a product made by", "Windows", "Microsoft"),
    ("PlayStation is a product made by", "PlayStation", "Sony"),
    ("Beats Music is owned by", "Beats Music", "Apple"),
    ("YouTube is owned by", "YouTube", "Google"),
    ("Instagram is owned by", "Instagram", "Facebook"),
    ("Toyota Camry is produced by", "Toyota Camry", "Toyota"),
    ("Honda Civic is produced by", "Honda Civic", "Honda"),
    ("Ford Mustang is produced by", "Ford Mustang", "Ford"),
    ("The Louvre is located in the city of", "The Louvre", "Paris"),
    ("The Kremlin is located in the city of", "The Kremlin", "Moscow"),
    ("The Vatican is located in the city of", "The Vatican", "Rome"),
    ("Danielle Darrieux's mother tongue is", "Danielle Darrieux", "French"),
    ("Albert Einstein was born in the country of", "Albert Einstein", "Germany"),
    ("Napoleon Bonaparte was born in the country of", "Napoleon Bonaparte", "France"),
    ("Toronto is a city in the country of", "Toronto", "Canada"),
    ("Munich is a city in the country of", "Munich", "Germany"),
    ("Osaka is a city in the country of", "Osaka", "Japan"),
    ("Barcelona is a city in the country of", "Barcelona", "Spain"),
    ("Milan is a city in the country of", "Milan", "Italy"),
    ("Marseille is a city in the country of", "Marseille", "France"),
    ("Shanghai is a city in the country of", "Shanghai", "China"),
    ("Chicago is a city in the country of", "Chicago", "the United States"),
]


def json_float(x):
    """Formats a float the way the Rust serializer (ryu) does."""
    x = float(x)
    if x == 0:
        return "0.0"
    sign = "-" if x < 0 else ""
    r = repr(abs(x))
    if "e" in r:
        m, e = r.split("e")
        e = int(e)
    else:
        m, e = r, 0
    if "." in m:
        whole, frac = m.split(".")
    else:
        whole, frac = m, ""
    digits = (whole + frac).lstrip("0")
    point = len(whole) + e - (len(whole + frac) - len((whole + frac).lstrip("0")))
    digits = digits.rstrip("0") or "0"
    n, kk = len(digits), point
    if 0 <= kk - n and kk <= 16:
        out = digits + "0" * (kk - n) + ".0"
    elif 0 < kk <= 16:
        out = digits[:kk] + "." + digits[kk:]
    elif -5 < kk <= 0:
        out = "0." + "0" * (-kk) + digits
    else:
        exp10 = kk - 1
        out = digits[0] + ("." + digits[1:] if n > 1 else "") + f"e{exp10}"
    return sign + out


def config_json(cfg):
    # field order and formatting of the Rust ModelConfig serializer
    parts = [
        f'"n_layers":{cfg["n_layers"]}',
        f'"n_heads":{cfg["n_heads"]}',
        f'"d_model":{cfg["d_model"]}',
        f'"d_inner":{cfg["d_inner"]}',
        f'"vocab_size":{cfg["vocab_size"]}',
        f'"max_positions":{cfg["max_positions"]}',
        '"layout":"serial"',
        '"activation":"gelu"',
        '"head_kind":"tied_embedding"',
        f'"norm_epsilon":{json_float(cfg["norm_epsilon"])}',
    ]
    return ("{" + ",".join(parts) + "}").encode()


def align(n):
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_container(path, cfg, tensors):
    """`tensors` is an ordered list of (name, float32 ndarray)."""
    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        offset = align(offset + 4 * arr.size)
    cj = config_json(cfg)
    dj = json.dumps(directory, separators=(",", ":")).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(cj)) + cj
    out += struct.pack("<Q", len(dj)) + dj
    out += b"\0" * (align(len(out)) - len(out))
    start = len(out)
    for (name, arr), entry in zip(tensors, directory):
        out += b"\0" * (start + entry["offset"] - len(out))
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


def gpt2_tensors(model):
    """Maps GPT-2 parameters onto the container's tensor names and conventions."""
    sd = {k: v.detach().to("cpu").float().numpy() for k, v in model.state_dict().items()}
    c = model.config
    d = c.n_embd
    tensors = [("embedding", sd["transformer.wte.weight"]), ("position_embedding", sd["transformer.wpe.weight"])]
    for i in range(c.n_layer):
        p = f"transformer.h.{i}."
        # Conv1D stores (in, out): x @ W, the row convention used for attention
        w_attn = sd[p + "attn.c_attn.weight"]
        b_attn = sd[p + "attn.c_attn.bias"]
        tensors += [
            (f"layers.{i}.attn_norm.scale", sd[p + "ln_1.weight"]),
            (f"layers.{i}.attn_norm.bias", sd[p + "ln_1.bias"]),
            (f"layers.{i}.w_q", w_attn[:, :d]),
            (f"layers.{i}.w_k", w_attn[:, d : 2 * d]),
            (f"layers.{i}.w_v", w_attn[:, 2 * d :]),
            (f"layers.{i}.w_o", sd[p + "attn.c_proj.weight"]),
            (f"layers.{i}.b_q", b_attn[:d]),
            (f"layers.{i}.b_k", b_attn[d : 2 * d]),
            (f"layers.{i}.b_v", b_attn[2 * d :]),
            (f"layers.{i}.b_o", sd[p + "attn.c_proj.bias"]),
            (f"layers.{i}.mlp_norm.scale", sd[p + "ln_2.weight"]),
            (f"layers.{i}.mlp_norm.bias", sd[p + "ln_2.bias"]),
            # the MLP matrices use the column convention, hence the transposes
            (f"layers.{i}.w_in", sd[p + "mlp.c_fc.weight"].T),
            (f"layers.{i}.b_in", sd[p + "mlp.c_fc.bias"]),
            (f"layers.{i}.w_out", sd[p + "mlp.c_proj.weight"].T),
            (f"layers.{i}.b_out", sd[p + "mlp.c_proj.bias"]),
        ]
    tensors += [("final_norm.scale", sd["transformer.ln_f.weight"]), ("final_norm.bias", sd["transformer.ln_f.bias"])]
    cfg = {
        "n_layers": c.n_layer,
        "n_heads": c.n_head,
        "d_model": d,
        "d_inner": c.n_inner or 4 * d,
        "vocab_size": c.vocab_size,
        "max_positions": c.n_positions,
        "norm_epsilon": c.layer_norm_epsilon,
    }
    return cfg, tensors


def check_supported(config):
    act = getattr(config, "activation_function", "gelu_new")
    if act not in ("gelu_new", "gelu_pytorch_tanh"):
        sys.exit(f"unsupported activation {act!r}; the engine implements the tanh GELU")
    if getattr(config, "scale_attn_by_inverse_layer_idx", False) or not getattr(config, "scale_attn_weights", True):
        sys.exit("unsupported attention scaling")


def convert(args):
    import torch
    from transformers import GPT2LMHeadModel, GPT2TokenizerFast

    model = GPT2LMHeadModel.from_pretrained(args.model, torch_dtype=torch.float32).eval()
    check_supported(model.config)
    tok = GPT2TokenizerFast.from_pretrained(args.model)
    os.makedirs(os.path.join(args.out, "tokenizer"), exist_ok=True)
    cfg, tensors = gpt2_tensors(model)
    write_container(os.path.join(args.out, "model.rpwt"), cfg, tensors)
    tok.save_vocabulary(os.path.join(args.out, "tokenizer"))

    prompts = []
    with torch.no_grad():
        for text in PROMPTS:
            ids = tok(text)["input_ids"]
            logits = model(torch.tensor([ids])).logits[0, -1].tolist()
            prompts.append({"text": text, "tokens": ids, "logits": logits})
    with open(os.path.join(args.out, "reference_logits.json"), "w") as f:
        json.dump({"model": args.model, "prompts": prompts}, f)
    with open(os.path.join(args.out, "facts.jsonl"), "w") as f:
        for query, subject, attribute in FACTS:
            f.write(json.dumps({"query": query, "subject": subject, "attribute": attribute}) + "\n")
    print(f"wrote {args.out}: L={cfg['n_layers']} H={cfg['n_heads']} d={cfg['d_model']} V={cfg['vocab_size']}")


def fixture(args):
    import torch
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(args.seed)
    config = GPT2Config(
        vocab_size=64,
        n_positions=16,
        n_embd=16,
        n_layer=2,
        n_head=2,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        activation_function="gelu_new",
        bos_token_id=0,
        eos_token_id=0,
    )
    model = GPT2LMHeadModel(config).eval()
    with torch.no_grad():
        # default init leaves norms at identity and biases at zero; perturb
        # everything so each parameter matters
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    os.makedirs(args.out, exist_ok=True)
    cfg, tensors = gpt2_tensors(model)
    write_container(os.path.join(args.out, "model.rpwt"), cfg, tensors)
    rng = np.random.default_rng(args.seed)
    sequences = []
    with torch.no_grad():
        for n in (1, 3, 5, 8, 16):
            ids = rng.integers(0, config.vocab_size, size=n).tolist()
            logits = model(torch.tensor([ids])).logits[0].tolist()
            sequences.append({"tokens": ids, "logits": logits})
    with open(os.path.join(args.out, "reference.json"), "w") as f:
        json.dump({"sequences": sequences}, f)
    print(f"wrote fixture to {args.out}")


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="mode", required=True)
    c = sub.add_parser("convert")
    c.add_argument("--model", default="gpt2")
    c.add_argument("--out", required=True)
    x = sub.add_parser("fixture")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    {"convert": convert, "fixture": fixture}[args.mode](args)


if __name__ == "__main__":
    main()
