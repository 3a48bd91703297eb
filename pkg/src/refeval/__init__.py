"""Reference-grounded knowledge evaluation of language models.

A reference corpus is turned into knowledge units, the units are clustered,
and the model under evaluation is questioned cluster by cluster until every
unit has been judged against its reference text (or progress stalls).
"""

__version__ = "0.1.0"
