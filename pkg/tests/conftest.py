import numpy as np
import pytest

from ivedit.denoiser import EditingModel
from ivedit.diffusion import make_schedule
from ivedit.media import Application, SpriteConfig, Triplet, generate_sprite_video


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def fresh_model():
    """Freshly initialized model; tests must not mutate it."""
    return EditingModel()


def make_train_triplet(seed, num_frames=12, size=32):
    clip, mask_seqs = generate_sprite_video(
        SpriteConfig(num_frames=num_frames, height=size, width=size, num_sprites=1,
                     motion="linear" if seed % 2 else "circular", seed=seed)
    )
    return Triplet(video=clip, masks=mask_seqs[0], reference=clip.frames[0],
                   application=Application.TEXTURE_TRANSFER, id=f"train_{seed:03d}")


def make_bench_triplet(seed, application, num_frames=4, size=32):
    clip, mask_seqs = generate_sprite_video(
        SpriteConfig(num_frames=num_frames, height=size, width=size, num_sprites=1, seed=seed)
    )
    ref_clip, _ = generate_sprite_video(
        SpriteConfig(num_frames=2, height=size, width=size, num_sprites=1, seed=seed + 900)
    )
    masks = mask_seqs[0]
    if application == Application.OBJECT_MODIFICATION:
        from ivedit.cli import _rect_masks

        masks = _rect_masks(masks)
    return Triplet(video=clip, masks=masks, reference=ref_clip.frames[0],
                   application=application, id=f"bench_{seed:03d}")


@pytest.fixture(scope="session")
def tiny_dataset():
    return [make_train_triplet(seed) for seed in range(4)]


@pytest.fixture(scope="session")
def tiny_triplet():
    return make_bench_triplet(50, Application.TEXTURE_TRANSFER)
