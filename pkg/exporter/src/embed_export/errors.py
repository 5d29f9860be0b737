"""Exception type for the export pipeline.

The CLI maps it onto the exit-code contract: export and input problems
exit 1, I/O problems (plain OSError) exit 2.
"""


class ExportError(Exception):
    """An input file, configuration, or export step is unusable.

    Messages for file problems carry ``path:line`` so they can be
    located without a debugger.
    """
