"""gridbox: a desk-scale federated medical-imaging grid.

Autonomous site nodes keep a local metadata catalog and a content-addressed
image store; a central registry ties them into one virtual organization.
Queries are decomposed and evaluated where the data lives, results come back
as mergeable XML sets, and uploaded pixel-pipeline programs execute next to
the images they select.
"""

__version__ = "0.1.0"

from gridbox.ids import GlobalId, IdMinter

__all__ = ["GlobalId", "IdMinter", "__version__"]
