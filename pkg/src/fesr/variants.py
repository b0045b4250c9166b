"""Ablation variants as flag bundles.

FG-* variants train the synthesis GAN alone (no recognizer); FESR_* variants
are recognition experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class VariantSpec:
    name: str
    content_losses: bool = True      # rec + id (off: FG-CO)
    identity_loss: bool = True       # id (off: FG-IP)
    image_disc: bool = True          # D_img entirely (off: FG-Dimg)
    image_disc_cls: bool = True      # D_img auxiliary classifier (off: FG-Dimg_cls)
    latent_disc: bool = True         # D_z (off: FG-Dz)
    recognizer: bool = True          # train R at all (off: every FG-* variant)
    joint: bool = True               # R's loss reaches G (off: FESR_SL)
    pretrain_stage: bool = True      # off: FESR_OneSt, forces P_pre = 0
    intra_loss: bool = True          # off: FESR_JL-IL
    rdbp: bool = True                # off: FESR_JL-RDBP, full gradients
    prior_synthesis: bool = True     # off: FESR_Real, x_pf from g(x) for all K classes
    synthesis: bool = True           # off: BASELINE, R on real images only

    @property
    def flags(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "name"}


_SYNTH_ONLY = dict(recognizer=False)

VARIANTS: dict[str, VariantSpec] = {
    v.name: v
    for v in (
        VariantSpec("FG", **_SYNTH_ONLY),
        VariantSpec("FG-CO", content_losses=False, identity_loss=False, **_SYNTH_ONLY),
        VariantSpec("FG-IP", identity_loss=False, **_SYNTH_ONLY),
        VariantSpec("FG-Dimg", image_disc=False, image_disc_cls=False, **_SYNTH_ONLY),
        VariantSpec("FG-Dimg_cls", image_disc_cls=False, **_SYNTH_ONLY),
        VariantSpec("FG-Dz", latent_disc=False, **_SYNTH_ONLY),
        VariantSpec("BASELINE", synthesis=False, intra_loss=False, joint=False),
        VariantSpec("FESR_SL", joint=False),
        VariantSpec("FESR_OneSt", pretrain_stage=False),
        VariantSpec("FESR_JL-IL", intra_loss=False),
        VariantSpec("FESR_JL-RDBP", rdbp=False),
        VariantSpec("FESR_Real", prior_synthesis=False, intra_loss=False),
        VariantSpec("FESR_JL"),
    )
}

# The eleven ablations named alongside the two full models (FG, FESR_JL).
ABLATIONS = [n for n in VARIANTS if n not in ("FG", "FESR_JL")]


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
