"""Digital-library repository engine with first-class aggregations."""

from __future__ import annotations

from .errors import NCoreError
from .graph import ANNOTATES, MEMBER_OF, METADATA_FOR, Relationship
from .handles import Handle, Kind
from .repository import Repository
from .views import ViewSpec, is_in_view, metadata_in_view, resolve_view

__all__ = [
    "ANNOTATES",
    "MEMBER_OF",
    "METADATA_FOR",
    "Handle",
    "Kind",
    "NCoreError",
    "Relationship",
    "Repository",
    "ViewSpec",
    "is_in_view",
    "metadata_in_view",
    "resolve_view",
]

__version__ = "0.1.0"
