"""Masked-autoencoder pretraining over both modalities at once.

Most tokens are hidden, the encoder sees only the visible ones, and a
light decoder reconstructs raw patches at the masked positions. The
loss reads masked positions exclusively, so visible patches get no
reconstruction gradient. Afterward the encoder weights transfer into a
classifier and fine-tuning starts from structure instead of noise.
"""

import numpy as np

from mmtlab.mae import MaeConfig, MaeDecoders, mae_train, transfer_encoder
from mmtlab.missing import MmtBank
from mmtlab.model import MbtParameters, ModelConfig
from mmtlab.synthdata import SynthConfig, generate
from mmtlab.training import TrainConfig, train

SEED = 2
scfg = SynthConfig()
ds = generate(scfg, SEED, 1200, split="train")
mcfg = ModelConfig(scfg.audio, scfg.video)

# --- pretrain: watch the reconstruction loss fall -------------------------
mae_cfg = MaeConfig(epochs=4)
params = MbtParameters.init(mcfg, SEED)
decoders = MaeDecoders.init(mcfg, mae_cfg, SEED)
print(f"masking {int(100*mae_cfg.mask_ratio_audio)}% of audio tokens and "
      f"{int(100*mae_cfg.mask_ratio_video)}% of video tokens")
result = mae_train(params, decoders, ds, mae_cfg, SEED)
losses = [h["loss"] for h in result.history]
print("reconstruction loss by epoch: " + "  ".join(f"{v:.4f}" for v in losses))

# --- the masked-only rule, demonstrated rather than asserted --------------
# score one batch twice with different targets at VISIBLE positions; the
# loss cannot tell them apart because it reads masked positions only
from mmtlab.autodiff import Tape
from mmtlab.mae import mae_forward, mask_batch

probe = MbtParameters.init(mcfg, SEED)
probe_dec = MaeDecoders.init(mcfg, mae_cfg, SEED)
rng = np.random.default_rng(0)
batch = {m: ds.patches(m)[:8] for m in ("audio", "video")}
masks = {m: mask_batch(8, mcfg.tokens(m), mae_cfg.mask_ratio(m), rng)
         for m in ("audio", "video")}
with Tape():
    _, losses = mae_forward(probe, probe_dec, mae_cfg, batch, masks)
scrambled = {m: batch[m].copy() for m in batch}
for m, (vis, _) in masks.items():
    scrambled[m][np.arange(8)[:, None], vis] += 1000.0  # corrupt visible targets
with Tape():
    _, losses_scrambled = mae_forward(probe, probe_dec, mae_cfg, batch, masks,
                                      targets=scrambled)
drift = max(abs(float(losses[m].data) - float(losses_scrambled[m].data))
            for m in ("audio", "video"))
vis_a, msk_a = masks["audio"]
print(f"\ncorrupting targets at visible positions moves the loss by {drift:.1e}")
print(f"audio mask hides {msk_a.shape[1]} of {mcfg.tokens('audio')} tokens per sample")

# --- transfer into a classifier and fine-tune briefly ----------------------
classifier, bank = transfer_encoder(params, mcfg, SEED)
tcfg = TrainConfig(epochs=2)
print("\nfine-tuning the transferred encoder for 2 epochs...")
ft = train(classifier, bank, ds, tcfg, SEED)
fresh = MbtParameters.init(mcfg, SEED)
fresh_bank = MmtBank.init(mcfg.embed_dim, SEED)
print("training a fresh model for the same 2 epochs...")
cold = train(fresh, fresh_bank, ds, tcfg, SEED)
print(f"epoch-2 loss: pretrained start {ft.history[-1]['loss']:.4f}, "
      f"cold start {cold.history[-1]['loss']:.4f}")
print("the transferred run should reach lower loss in the same budget;")
print("at this scale the margin is modest, and it is a soft comparison.")
