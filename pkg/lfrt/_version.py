"""Static version information."""

VERSION = '0.1.0'


def get_versions():
    """Version dict in the form release tooling expects."""
    return {'version': VERSION, 'full-revisionid': None, 'dirty': False, 'error': None, 'date': None}
