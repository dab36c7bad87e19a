try:
    from importlib.metadata import version as _pkg_version
except ImportError:  # pragma: no cover
    _pkg_version = None

_FALLBACK_VERSION = "0.1.0"

if _pkg_version:
    try:
        __version__ = _pkg_version("tagstrain")
    except Exception:  # pragma: no cover - fallback only when metadata lookup fails
        __version__ = _FALLBACK_VERSION
else:  # pragma: no cover
    __version__ = _FALLBACK_VERSION

__all__ = ["__version__"]
