from .objectives import (  # noqa: F401
    feature_align,
    info_nce_symmetric,
    multiview_loss,
    n_step_target,
    stabilized_q_loss,
)
from .curriculum import aug_view_selector, magnitude_at, scaled_spec  # noqa: F401
