import io
import itertools

import matplotlib
import matplotlib.patches as patches
import matplotlib.pyplot as plt
import tskit


def truncate_rows(num_rows, limit=None):
    """
    Return a list of indexes into a set of rows, but if a ``limit`` is set, truncate the
    number of rows and place a single ``-1`` entry, instead of the intermediate indexes
    """
    if limit is None or num_rows <= limit:
        return range(num_rows)
    return itertools.chain(
        range(limit // 2),
        [-1],
        range(num_rows - (limit - (limit // 2)), num_rows),
    )


def set_print_options(*, max_lines=40):
    """
    Set the options for printing to strings and HTML

    :param integer max_lines: The maximum number of lines to print from a table, beyond
    this number the middle of the table will be skipped.
    """
    # avoid circular import complaints
    from . import _print_options  # pylint: disable=import-outside-toplevel

    _print_options["max_lines"] = max_lines


def table_rows(records, limit=None):
    """
    Turn a list of row tuples into string rows, replacing the truncated middle
    by a ``__skipped__`` marker understood by the tskit table renderers
    """
    rows = []
    for j in truncate_rows(len(records), limit):
        if j == -1:
            rows.append(f"__skipped__{len(records) - limit}")
        else:
            rows.append([f"{x}" for x in records[j]])
    return rows


def unicode_table(headers, records, limit=20):
    unicode = tskit.util.unicode_table(table_rows(records, limit), header=headers, row_separator=False)
    # the renderer hardcodes its own package name
    linelen = unicode.find("\n")
    lines = []
    for line in unicode.split("\n"):
        if "skipped (tskit" in line:
            line = line.replace("skipped (tskit", f"skipped ({__package__}")
            if len(line) > linelen:
                line = line[: linelen - 1] + line[-1]
        lines.append(line)
    return "\n".join(lines)


def html_table(headers, records):
    from . import _print_options  # pylint: disable=import-outside-toplevel

    limit = _print_options["max_lines"]
    html = tskit.util.html_table(table_rows(records, limit), header=headers)
    return html.replace("tskit.set_print_options", f"{__package__}.set_print_options")


def add_cell(ax, x, y, value, vmax=1.0, cmap="Blues", fontsize=8):
    """
    Plotting utility function for adding a labelled, shaded cell to a heatmap
    """
    colour = plt.get_cmap(cmap)(0 if vmax == 0 else value / vmax)
    ax.add_patch(patches.Rectangle((x, y), 1, 1, facecolor=colour, edgecolor="white"))
    ax.text(
        x + 0.5,
        y + 0.5,
        f"{value:.2f}",
        va="center",
        ha="center",
        fontsize=fontsize,
        color="white" if value > 0.6 * vmax else "black",
    )


def add_row_label(ax, x_offset, y_pos, text, fontsize, color="black"):
    """
    Plotting utility function for adding row labels to heatmaps
    """
    ax.text(x_offset, y_pos, text, va="center", ha="right", fontsize=fontsize, color=color)


def save_svg(fig, path, data=None):
    """
    Save a figure as a standalone SVG file. If ``data`` (a pandas DataFrame) is
    given, the plotted numbers are embedded in the file's description metadata
    as CSV text. Dates and element ids are fixed so repeated saves are
    byte-identical.
    """
    metadata = {"Date": None, "Creator": __package__}
    if data is not None:
        metadata["Description"] = data.to_csv(index=False, lineterminator="\n")
    with matplotlib.rc_context({"svg.hashsalt": __package__, "svg.fonttype": "none"}):
        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", metadata=metadata)
    plt.close(fig)
    with open(path, "w", encoding="utf-8") as f:
        f.write(buffer.getvalue())
    return path
