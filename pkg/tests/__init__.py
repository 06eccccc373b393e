# vim: ai:sw=4:ts=4:sta:et:fo=croql
