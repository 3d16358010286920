#!/usr/bin/env python3
"""Smoke test for the gpvlm_py extension module.

Builds are loaded straight from the cargo target directory, so run
`cargo build -p gpvlm-py` (or `--release`) first, then:

    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libgpvlm_py.so",
        ROOT / "target" / "debug" / "libgpvlm_py.so",
    ]
    for path in candidates:
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("gpvlm_py", str(path))
            spec = importlib.util.spec_from_loader("gpvlm_py", loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            print(f"loaded {path}")
            return mod
    sys.exit("no libgpvlm_py.so found; run `cargo build -p gpvlm-py` first")


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    g = load_module()

    # byte tokenizer round trip
    text = "the meaning of life".encode()
    toks = g.tokenize(text)
    assert toks[:2] == [116, 104]
    assert g.detokenize(toks) == text
    print("tokenizer: ok")

    # kernel matrix closed form
    k = g.kernel_matrix(1.0, 1.0, 0.0, 3)
    approx(k[0][1], math.exp(-0.5), 1e-12)
    approx(k[0][2], math.exp(-2.0), 1e-12)
    approx(k[1][1], 1.0, 1e-12)
    print("kernel matrix: ok")

    # AR draws carry temporal structure; independent draws do not,
    # and the GP prior separates them by a wide margin
    var, ls, jit = 1.0, 3.0, 1e-5
    ar = g.sample_ar_trajectory(var, ls, jit, 64, 8, seed=1)
    non = g.sample_nonar_trajectory(var, ls, jit, 64, 8, 2)
    corr_ar = g.cosine_autocorr(ar, 1)
    corr_non = g.cosine_autocorr(non, 1)
    assert corr_ar > 0.3, corr_ar
    assert abs(corr_non) < 0.3, corr_non
    lp_ar = g.logdensity_gp(var, ls, jit, ar)
    lp_non = g.logdensity_gp(var, ls, jit, non)
    assert lp_ar - lp_non > 10 * 64, (lp_ar, lp_non)
    diag_ratio = g.logdensity_diag(var, ls, jit, ar) / g.logdensity_diag(var, ls, jit, non)
    assert 0.5 < diag_ratio < 2.0, diag_ratio
    print(f"gp prior: ok (corr_1 AR {corr_ar:.3f}, log p gap {lp_ar - lp_non:.3e})")

    # KL against the prior is zero for a matched posterior in the
    # short-lengthscale (diagonal) limit
    means = [[0.0] * 4 for _ in range(6)]
    variances = [[1.0 + 1e-6] * 4 for _ in range(6)]
    kl = g.kl_posterior_to_gp(1.0, 1e-3, 1e-6, means, variances)
    assert abs(kl) < 1e-6, kl
    print("kl: ok")

    # collapse metrics
    loop = g.tokenize(b"abcabcabc")
    cover, cat = g.loop_detect(loop, 3)
    assert cat and cover == 1.0
    assert g.consec_frac(g.tokenize(b"aabb")) == 2 / 3
    assert g.rep_n(g.tokenize(b"xxxxxxxx"), 2) == 1 - 1 / 7
    assert g.rare_frac([1, 2], [1.0, 0.0]) == 0.5
    print("metrics: ok")

    # tiny GP-VAE: losses fall, generation and checkpoints work
    corpus = (b"abcdefghijklmnopqrstuvwxyz" * 200)[:4096]
    cfg = "\n".join(
        [
            't_train = 32',
            'd_z = 8',
            'channels = 32',
            'n_multi = 2',
            'seed = 3',
        ]
    )
    vae = g.GpVae(cfg)
    rows = vae.train(corpus, 60)
    assert rows[-1]["ppl"] < rows[0]["ppl"], (rows[0]["ppl"], rows[-1]["ppl"])
    assert all(r["kl_capped_per_token"] <= 8.0 for r in rows)
    out_ar = vae.generate(b"abcdefgh", 32, mode="ar", temperature=0.8, seed=7)
    out_non = vae.generate(b"abcdefgh", 32, mode="nonar", temperature=0.8, seed=7)
    assert len(out_ar) == 32 and len(out_non) == 32
    ppl = vae.continuation_ppl(b"abcdefgh", out_ar)
    assert ppl > 0 and math.isfinite(ppl)
    means = vae.encode_means(b"abcdefgh")
    assert len(means) == 8 and len(means[0]) == 8
    ck = ROOT / "target" / "smoke_gpvae.ckpt"
    vae.save(str(ck))
    again = g.GpVae.load(str(ck))
    assert again.generate(b"abcdefgh", 32, mode="ar", temperature=0.8, seed=7) == out_ar
    print(f"gpvae: ok (ppl {rows[0]['ppl']:.1f} -> {rows[-1]['ppl']:.2f}, cont ppl {ppl:.2f})")

    # tiny transformer: learns the periodic stream, scores sequences
    tf_cfg = cfg + '\ntf_layers = 2\ntf_heads = 2\ntf_d_model = 32\ntf_d_ff = 64'
    tf = g.TransformerLm(tf_cfg)
    tf_rows = tf.train(corpus, 80)
    assert tf_rows[-1][2] < tf_rows[0][2], (tf_rows[0], tf_rows[-1])
    gen = tf.generate(b"abcdefgh", 24, temperature=0.0, seed=0)
    assert len(gen) == 24
    nll, probs = tf.score(b"abcdefghijkl")
    assert len(probs) == 12 and math.isfinite(nll)
    ck_tf = ROOT / "target" / "smoke_tf.ckpt"
    tf.save(str(ck_tf))
    again_tf = g.TransformerLm.load(str(ck_tf))
    assert again_tf.generate(b"abcdefgh", 24, temperature=0.0, seed=0) == gen
    print(f"transformer: ok (ppl {tf_rows[0][2]:.1f} -> {tf_rows[-1][2]:.2f})")

    print("smoke test passed")


if __name__ == "__main__":
    main()
