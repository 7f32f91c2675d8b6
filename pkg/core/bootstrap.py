"""tfi-util のサービス初期化ヘルパー。"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

from .config import load_domain
from .domain import DomainSpec
from .experiment import ExperimentService

logger = logging.getLogger(__name__)


def setup_services(
    spec_path: Union[str, Path],
    *,
    cache_dir: Optional[Union[str, Path]] = None,
) -> Tuple[ExperimentService, DomainSpec]:
    """領域定義を読み込み、実験サービスを組み立てる。"""
    spec = load_domain(spec_path)
    service = ExperimentService(spec, cache_dir=cache_dir)
    logger.debug(
        "services ready: spec=%s sources=%d cache_dir=%s", spec_path, spec.n_sources, cache_dir or "-"
    )
    if spec.n_sources == 0:
        logger.warning("熱源が1つも定義されていません (CMAE は計算できません)")
    return service, spec
